#include "vehids/pso.hpp"

#include "vehids/artifact.hpp"
#include "vehids/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <ostream>
#include <sstream>

namespace vehids {

void SearchSpace::validate() const
{
    if (dims.empty())
        throw ConfigError("search space has no dimensions");
    for (const auto& d : dims) {
        if (!(d.lower < d.upper))
            throw ConfigError("dimension '" + d.name + "': lower bound must be below upper bound");
        if (d.kind == DimKind::integer &&
            (d.lower != std::floor(d.lower) || d.upper != std::floor(d.upper)))
            throw ConfigError("integer dimension '" + d.name + "' needs integer bounds");
    }
}

std::size_t SearchSpace::index_of(std::string_view name) const
{
    for (std::size_t i = 0; i < dims.size(); ++i)
        if (dims[i].name == name)
            return i;
    throw ConfigError("search space has no dimension '" + std::string(name) + "'");
}

SearchSpace table_search_space(std::size_t frozen_lower, std::size_t frozen_upper)
{
    SearchSpace s;
    s.dims = {
        {"epochs", DimKind::integer, 5, 50},
        {"batch_size", DimKind::integer, 32, 128},
        {"early_stop_patience", DimKind::integer, 2, 5},
        {"learning_rate", DimKind::continuous, 0.001, 0.1},
        {"dropout_rate", DimKind::continuous, 0.2, 0.8},
        {"frozen_layers", DimKind::integer, static_cast<double>(frozen_lower),
         static_cast<double>(frozen_upper)},
    };
    return s;
}

SearchSpace parse_search_space(std::string_view json_text)
{
    using nlohmann::json;
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("search space: ") + e.what());
    }
    if (!j.contains("version"))
        throw ConfigError("search space: missing mandatory 'version' field");
    if (j.at("version").get<int>() != 1)
        throw VersionError("search space: unsupported version " + j.at("version").dump());
    SearchSpace s;
    try {
        for (const auto& jd : j.at("dims")) {
            Dimension d;
            d.name = jd.at("name").get<std::string>();
            auto kind = jd.at("kind").get<std::string>();
            if (kind == "integer")
                d.kind = DimKind::integer;
            else if (kind == "continuous")
                d.kind = DimKind::continuous;
            else
                throw ConfigError("dimension '" + d.name + "': unknown kind '" + kind + "'");
            d.lower = jd.at("lower").get<double>();
            d.upper = jd.at("upper").get<double>();
            s.dims.push_back(std::move(d));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("search space: ") + e.what());
    }
    s.validate();
    return s;
}

SearchSpace load_search_space(const std::filesystem::path& path)
{
    return parse_search_space(read_text_file(path));
}

std::string search_space_to_json(const SearchSpace& space)
{
    nlohmann::json j;
    j["version"] = 1;
    j["dims"] = nlohmann::json::array();
    for (const auto& d : space.dims)
        j["dims"].push_back({{"name", d.name},
                             {"kind", d.kind == DimKind::integer ? "integer" : "continuous"},
                             {"lower", d.lower},
                             {"upper", d.upper}});
    return j.dump(2) + "\n";
}

Swarm init_swarm(const SearchSpace& space, std::size_t size, std::uint64_t seed, const SwarmOptions& options)
{
    space.validate();
    if (size < 2)
        throw ConfigError("swarm needs at least 2 particles");
    Swarm s;
    s.options = options;
    s.rng_seed = seed;
    s.rng.seed(seed);
    for (const auto& d : space.dims)
        s.v_max.push_back((d.upper - d.lower) / 2.0);
    s.particles.resize(size);
    for (auto& p : s.particles) {
        p.position.resize(space.size());
        p.velocity.resize(space.size());
        for (std::size_t d = 0; d < space.size(); ++d) {
            p.position[d] = uniform(s.rng, space.dims[d].lower, space.dims[d].upper);
            p.velocity[d] = uniform(s.rng, -s.v_max[d], s.v_max[d]);
        }
        p.best.position = p.position;
    }
    s.global_best.position = s.particles.front().position;
    return s;
}

void update_bests(Swarm& swarm, std::span<const double> scores)
{
    if (scores.size() != swarm.particles.size())
        throw ConfigError("got " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(swarm.particles.size()) + " particles");
    for (std::size_t i = 0; i < scores.size(); ++i) {
        auto& p = swarm.particles[i];
        if (scores[i] > p.best.score) {
            p.best.score = scores[i];
            p.best.position = p.position;
        }
        if (p.best.score > swarm.global_best.score)
            swarm.global_best = p.best;
    }
}

void move_particle(Particle& p, std::span<const double> global_best, std::span<const double> u1,
                   std::span<const double> u2, const SearchSpace& space, std::span<const double> v_max,
                   double inertia)
{
    for (std::size_t d = 0; d < space.size(); ++d) {
        double v = inertia * p.velocity[d] + u1[d] * (p.best.position[d] - p.position[d]) +
                   u2[d] * (global_best[d] - p.position[d]);
        v = std::clamp(v, -v_max[d], v_max[d]);
        double x = p.position[d] + v;
        const double lo = space.dims[d].lower, hi = space.dims[d].upper;
        if (x > hi) {
            x = hi - (x - hi);
            v = -v;
        } else if (x < lo) {
            x = lo + (lo - x);
            v = -v;
        }
        p.position[d] = std::clamp(x, lo, hi);
        p.velocity[d] = v;
    }
}

void step(Swarm& swarm, const SearchSpace& space, std::span<const double> scores)
{
    update_bests(swarm, scores);
    const auto n = space.size();
    std::vector<double> u1(n), u2(n);
    for (auto& p : swarm.particles) {
        for (std::size_t d = 0; d < n; ++d) {
            u1[d] = uniform(swarm.rng, 0.0, swarm.options.phi1);
            u2[d] = uniform(swarm.rng, 0.0, swarm.options.phi2);
        }
        move_particle(p, swarm.global_best.position, u1, u2, space, swarm.v_max, swarm.options.inertia);
    }
}

double Assignment::get(std::string_view name) const
{
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name)
            return values[i];
    throw ConfigError("assignment has no '" + std::string(name) + "'");
}

std::string Assignment::to_string() const
{
    std::ostringstream os;
    os.precision(10);
    for (std::size_t i = 0; i < names.size(); ++i)
        os << (i ? " " : "") << names[i] << '=' << values[i];
    return os.str();
}

Assignment decode_position(const SearchSpace& space, std::span<const double> position)
{
    if (position.size() != space.size())
        throw ShapeError("position has " + std::to_string(position.size()) + " entries, space has " +
                         std::to_string(space.size()) + " dims");
    Assignment a;
    for (std::size_t d = 0; d < space.size(); ++d) {
        const auto& dim = space.dims[d];
        double v = position[d];
        if (dim.kind == DimKind::integer)
            v = std::clamp(std::round(v), dim.lower, dim.upper);
        a.names.push_back(dim.name);
        a.values.push_back(v);
    }
    return a;
}

namespace {

std::string position_text(std::span<const double> x)
{
    std::ostringstream os;
    os.precision(10);
    os << '[';
    for (std::size_t i = 0; i < x.size(); ++i)
        os << (i ? ", " : "") << x[i];
    os << ']';
    return os.str();
}

double evaluate_one(const SearchSpace& space, const Objective& objective, std::span<const double> x)
{
    double score;
    try {
        score = objective(x);
    } catch (const Error& e) {
        throw Error(e.kind(), "objective failed at " + position_text(x) + " (" +
                                  decode_position(space, x).to_string() + "): " + e.what());
    } catch (const std::exception& e) {
        throw Error(ErrorKind::numeric, "objective failed at " + position_text(x) + ": " + e.what());
    }
    if (std::isnan(score))
        throw NumericError("objective returned NaN at " + position_text(x));
    return score;
}

std::vector<double> evaluate_all(const SearchSpace& space, const Objective& objective, const Swarm& swarm,
                                 std::size_t jobs)
{
    const auto n = swarm.particles.size();
    std::vector<double> scores(n);
    if (jobs <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            scores[i] = evaluate_one(space, objective, swarm.particles[i].position);
        return scores;
    }
    for (std::size_t start = 0; start < n; start += jobs) {
        std::vector<std::future<double>> futs;
        for (std::size_t i = start; i < std::min(n, start + jobs); ++i)
            futs.push_back(std::async(std::launch::async, [&, i] {
                return evaluate_one(space, objective, swarm.particles[i].position);
            }));
        for (std::size_t i = 0; i < futs.size(); ++i)
            scores[start + i] = futs[i].get();
    }
    return scores;
}

} // namespace

OptimizeResult optimize(const SearchSpace& space, const Objective& objective, std::size_t swarm_size,
                        std::size_t iterations, std::uint64_t seed, const SwarmOptions& options,
                        std::size_t jobs)
{
    if (iterations < 1)
        throw ConfigError("optimize needs at least one iteration");
    auto swarm = init_swarm(space, swarm_size, seed, options);
    OptimizeResult result;
    for (std::size_t it = 1; it <= iterations; ++it) {
        auto scores = evaluate_all(space, objective, swarm, jobs);
        if (it < iterations)
            step(swarm, space, scores);
        else
            update_bests(swarm, scores);
        result.trace.push_back(
            {it, swarm.global_best.score, decode_position(space, swarm.global_best.position)});
    }
    result.best_position = swarm.global_best.position;
    result.best_score = swarm.global_best.score;
    result.best = decode_position(space, result.best_position);
    return result;
}

void write_trace_csv(std::ostream& out, const SearchSpace& space, const std::vector<TraceEntry>& trace)
{
    out << "iteration,best_score";
    for (const auto& d : space.dims)
        out << ',' << d.name;
    out << '\n';
    char buf[64];
    for (const auto& t : trace) {
        std::snprintf(buf, sizeof buf, "%zu,%.10g", t.iteration, t.best_score);
        out << buf;
        for (double v : t.best.values) {
            std::snprintf(buf, sizeof buf, ",%.10g", v);
            out << buf;
        }
        out << '\n';
    }
}

} // namespace vehids
