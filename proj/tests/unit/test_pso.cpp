#include "vehids/error.hpp"
#include "vehids/pso.hpp"

#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <sstream>

using namespace vehids;

namespace {

SearchSpace box2(double lo = -5, double hi = 5)
{
    SearchSpace s;
    s.dims = {{"x", DimKind::continuous, lo, hi}, {"y", DimKind::continuous, lo, hi}};
    return s;
}

double neg_sphere(std::span<const double> x)
{
    double s = 0;
    for (double v : x)
        s += v * v;
    return -s;
}

bool within(const Swarm& swarm, const SearchSpace& space)
{
    for (const auto& p : swarm.particles)
        for (std::size_t d = 0; d < space.size(); ++d)
            if (p.position[d] < space.dims[d].lower || p.position[d] > space.dims[d].upper)
                return false;
    return true;
}

} // namespace

TEST_CASE("swarm construction")
{
    const auto space = table_search_space(0, 2);
    REQUIRE(space.size() == 6);
    const auto swarm = init_swarm(space, 20, 1);
    CHECK(swarm.particles.size() == 20);
    CHECK(within(swarm, space));
    for (const auto& p : swarm.particles) {
        CHECK(p.position.size() == 6);
        for (std::size_t d = 0; d < 6; ++d)
            CHECK(std::abs(p.velocity[d]) <= swarm.v_max[d]);
    }
    CHECK(swarm.v_max[space.index_of("batch_size")] == 48.0);
    const auto again = init_swarm(space, 20, 1);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(again.particles[i].position == swarm.particles[i].position);
        CHECK(again.particles[i].velocity == swarm.particles[i].velocity);
    }
    CHECK_THROWS_AS(init_swarm(SearchSpace{}, 4, 1), ConfigError);
    CHECK_THROWS(init_swarm(space, 1, 1));
}

TEST_CASE("search space validation and JSON")
{
    auto s = box2();
    s.dims[0].lower = 6;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    SearchSpace frac;
    frac.dims = {{"n", DimKind::integer, 0.5, 3}};
    CHECK_THROWS_AS(frac.validate(), ConfigError);
    const auto t = table_search_space(0, 2);
    const auto back = parse_search_space(search_space_to_json(t));
    REQUIRE(back.size() == t.size());
    for (std::size_t d = 0; d < t.size(); ++d) {
        CHECK(back.dims[d].name == t.dims[d].name);
        CHECK(back.dims[d].lower == t.dims[d].lower);
        CHECK(back.dims[d].upper == t.dims[d].upper);
        CHECK(back.dims[d].kind == t.dims[d].kind);
    }
}

TEST_CASE("velocity update by hand")
{
    SearchSpace s;
    s.dims = {{"x", DimKind::continuous, -10, 10}};
    Particle p;
    p.position = {1.0};
    p.velocity = {0.5};
    p.best = {{2.0}, 0.0};
    const double g[] = {3.0}, u1[] = {0.5}, u2[] = {0.25}, vmax[] = {10.0};
    move_particle(p, g, u1, u2, s, vmax);
    CHECK(p.velocity[0] == 1.5);
    CHECK(p.position[0] == 2.5);
}

TEST_CASE("shared best with zero velocity is a fixpoint")
{
    const auto s = box2();
    Particle p;
    p.position = {1.25, -3.5};
    p.velocity = {0, 0};
    p.best = {p.position, -1};
    const double u[] = {0.9, 1.3}, vmax[] = {5, 5};
    move_particle(p, p.position, u, u, s, vmax);
    CHECK(p.position == std::vector<double>{1.25, -3.5});
    CHECK(p.velocity == std::vector<double>{0, 0});
}

TEST_CASE("velocity clamps and positions reflect at the bounds")
{
    SearchSpace s;
    s.dims = {{"x", DimKind::continuous, 0, 10}};
    Particle p;
    p.position = {9.0};
    p.velocity = {0.0};
    p.best = {{9.0}, 0};
    const double g[] = {30.0}, u1[] = {0.0}, u2[] = {1.0}, vmax[] = {5.0};
    move_particle(p, g, u1, u2, s, vmax);
    CHECK(p.position[0] == 6.0);  // 9 + 5 = 14 reflects to 6
    CHECK(p.velocity[0] == -5.0);
}

TEST_CASE("positions stay in bounds for any update sequence")
{
    const auto space = table_search_space(0, 3);
    auto swarm = init_swarm(space, 15, 9);
    Rng rng(2);
    for (int it = 0; it < 200; ++it) {
        std::vector<double> scores(15);
        for (auto& v : scores)
            v = uniform(rng, -1, 1);
        step(swarm, space, scores);
        REQUIRE(within(swarm, space));
    }
    CHECK_THROWS(step(swarm, space, std::vector<double>(3)));
}

TEST_CASE("decode rounds integers half away from zero then clamps")
{
    const auto space = table_search_space(0, 2);
    std::vector<double> pos(space.size());
    for (std::size_t d = 0; d < space.size(); ++d)
        pos[d] = space.dims[d].lower;
    pos[space.index_of("batch_size")] = 127.6;
    pos[space.index_of("learning_rate")] = 0.003;
    pos[space.index_of("epochs")] = 4.9;
    const auto a = decode_position(space, pos);
    CHECK(a.get("batch_size") == 128);
    CHECK(a.get("learning_rate") == 0.003);
    CHECK(a.get("epochs") == 5);
    pos[space.index_of("batch_size")] = 32.5;
    CHECK(decode_position(space, pos).get("batch_size") == 33);
    CHECK_THROWS_AS(a.get("momentum"), ConfigError);
}

TEST_CASE("negative sphere converges for most seeds")
{
    int hits = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto r = optimize(box2(), neg_sphere, 20, 50, seed);
        hits += std::abs(r.best_score) < 1e-2;
    }
    MESSAGE("sphere hits: " << hits << "/20");
    CHECK(hits >= 18);
}

TEST_CASE("one iteration returns the best initial sample")
{
    const auto space = box2();
    const auto r = optimize(space, neg_sphere, 12, 1, 5);
    const auto swarm = init_swarm(space, 12, 5);
    double best = -1e300;
    for (const auto& p : swarm.particles)
        best = std::max(best, neg_sphere(p.position));
    CHECK(r.best_score == best);
    CHECK(r.trace.size() == 1);
}

TEST_CASE("trace is monotone and the run is reproducible")
{
    const auto space = box2(-3, 7);
    auto bumpy = [](std::span<const double> x) { return -std::abs(x[0] - 1) - std::abs(std::sin(3 * x[1])); };
    const auto r = optimize(space, bumpy, 10, 30, 3);
    for (std::size_t i = 1; i < r.trace.size(); ++i)
        CHECK(r.trace[i].best_score >= r.trace[i - 1].best_score);
    const auto again = optimize(space, bumpy, 10, 30, 3, {}, 4);
    CHECK(again.best_position == r.best_position);
    CHECK(again.best_score == r.best_score);

    std::ostringstream csv;
    write_trace_csv(csv, space, r.trace);
    CHECK(csv.str().rfind("iteration,best_score,x,y\n", 0) == 0);
}

TEST_CASE("global best is the max over personal bests")
{
    const auto space = box2();
    auto swarm = init_swarm(space, 8, 4);
    for (int it = 0; it < 10; ++it) {
        std::vector<double> scores;
        for (const auto& p : swarm.particles)
            scores.push_back(neg_sphere(p.position));
        update_bests(swarm, scores);
        double best = -1e300;
        for (const auto& p : swarm.particles)
            best = std::max(best, p.best.score);
        CHECK(swarm.global_best.score == best);
        step(swarm, space, scores);
    }
}

TEST_CASE("objective failures propagate with the position")
{
    auto boom = [](std::span<const double>) -> double { throw std::runtime_error("boom"); };
    try {
        optimize(box2(), boom, 4, 2, 1);
        FAIL("expected a throw");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("boom") != std::string::npos);
    }
    CHECK_THROWS_AS(optimize(box2(), neg_sphere, 4, 0, 1), ConfigError);
}
