#include "vehids/cnn.hpp"
#include "vehids/error.hpp"

namespace vehids {

namespace {

constexpr std::uint32_t model_payload_version = 1;

}

Bytes model_to_bytes(const CnnModel& model)
{
    ByteWriter w;
    w.u32(model_payload_version);
    w.u64(model.input_shape.channels);
    w.u64(model.input_shape.height);
    w.u64(model.input_shape.width);
    w.u64(model.num_classes);
    w.f64(model.dropout_rate);
    w.u64(model.layers.size());
    for (const auto& l : model.layers) {
        w.u8(static_cast<std::uint8_t>(l.kind));
        w.u8(l.frozen ? 1 : 0);
        w.u64(l.in_size);
        w.u64(l.out_size);
        w.u64(l.height);
        w.u64(l.width);
        w.f32_array(l.weights);
        w.f32_array(l.bias);
    }
    return std::move(w).bytes();
}

CnnModel model_from_bytes(std::span<const std::uint8_t> payload)
{
    ByteReader r(payload);
    if (auto v = r.u32(); v != model_payload_version)
        throw VersionError("model payload version " + std::to_string(v) + " unsupported (expects " +
                           std::to_string(model_payload_version) + ")");
    CnnModel m;
    m.input_shape.channels = r.u64();
    m.input_shape.height = r.u64();
    m.input_shape.width = r.u64();
    m.num_classes = r.u64();
    m.dropout_rate = r.f64();
    const auto n = r.u64();
    if (n == 0 || n > 64)
        throw CorruptionError("implausible layer count " + std::to_string(n));

    std::size_t expect_in = m.input_shape.channels;
    std::size_t h = m.input_shape.height, wd = m.input_shape.width;
    bool flattened = false;
    for (std::uint64_t i = 0; i < n; ++i) {
        Layer<float> l;
        auto kind = r.u8();
        if (kind < 1 || kind > 3)
            throw CorruptionError("unknown layer kind " + std::to_string(kind));
        l.kind = static_cast<LayerKind>(kind);
        l.frozen = r.u8() != 0;
        l.in_size = r.u64();
        l.out_size = r.u64();
        l.height = r.u64();
        l.width = r.u64();
        l.weights = r.f32_array();
        l.bias = r.f32_array();

        // architecture consistency
        if (l.kind == LayerKind::conv) {
            if (flattened || l.in_size != expect_in || l.height != h || l.width != wd ||
                l.weights.size() != l.out_size * l.in_size * 9)
                throw CorruptionError("inconsistent conv layer " + std::to_string(i));
            expect_in = l.out_size;
            h /= 2;
            wd /= 2;
        } else {
            if (!flattened) {
                expect_in = expect_in * h * wd;
                flattened = true;
            }
            if (l.in_size != expect_in || l.weights.size() != l.out_size * l.in_size)
                throw CorruptionError("inconsistent dense layer " + std::to_string(i));
            expect_in = l.out_size;
        }
        if (l.bias.size() != l.out_size)
            throw CorruptionError("bias length mismatch in layer " + std::to_string(i));
        if ((l.kind == LayerKind::head) != (i + 1 == n))
            throw CorruptionError("head must be the last layer");
        m.layers.push_back(std::move(l));
    }
    if (m.layers.back().out_size != m.num_classes)
        throw CorruptionError("head width does not match class count");
    if (!r.at_end())
        throw CorruptionError("trailing bytes after model");
    return m;
}

void save_model(const std::filesystem::path& path, const CnnModel& model)
{
    save_artifact(path, ArtifactKind::cnn_model, model_to_bytes(model));
}

CnnModel load_model(const std::filesystem::path& path)
{
    return model_from_bytes(load_artifact(path, ArtifactKind::cnn_model));
}

} // namespace vehids
