#pragma once

// Particle swarm optimizer over mixed continuous/integer boxes. Maximizes.
//
// Velocity update per particle i and dimension d:
//   v := w*v + U(0,phi1) * (p_i - x) + U(0,phi2) * (p - x)
// with w = 1 by default (no inertia term), v clamped to +-v_max (half the
// dimension's range), then x := x + v reflected at the bounds with the
// velocity sign flipped.

#include "vehids/random.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vehids {

enum class DimKind { continuous, integer };

struct Dimension {
    std::string name;
    DimKind kind = DimKind::continuous;
    double lower = 0.0;
    double upper = 1.0;
};

struct SearchSpace {
    int version = 1;
    std::vector<Dimension> dims;

    std::size_t size() const { return dims.size(); }
    void validate() const;
    std::size_t index_of(std::string_view name) const;  // throws ConfigError
};

// The CNN hyper-parameter space: epochs [5,50], batch [32,128], patience
// [2,5], learning rate (0.001,0.1), dropout (0.2,0.8), plus frozen layers
// [frozen_lower, frozen_upper] for the backbone being tuned.
SearchSpace table_search_space(std::size_t frozen_lower, std::size_t frozen_upper);

SearchSpace parse_search_space(std::string_view json_text);
SearchSpace load_search_space(const std::filesystem::path& path);
std::string search_space_to_json(const SearchSpace& space);

struct ScoredPosition {
    std::vector<double> position;
    double score = -std::numeric_limits<double>::infinity();
};

struct Particle {
    std::vector<double> position;
    std::vector<double> velocity;
    ScoredPosition best;
};

struct SwarmOptions {
    double phi1 = 1.49618;
    double phi2 = 1.49618;
    double inertia = 1.0;
};

struct Swarm {
    std::vector<Particle> particles;
    ScoredPosition global_best;
    std::vector<double> v_max;
    SwarmOptions options;
    std::uint64_t rng_seed = 0;
    Rng rng;
};

Swarm init_swarm(const SearchSpace& space, std::size_t size, std::uint64_t seed,
                 const SwarmOptions& options = {});

// Folds the scores of the particles' current positions into personal and
// global bests. Strict improvement only, so earlier particles win ties.
void update_bests(Swarm& swarm, std::span<const double> scores);

// One velocity/position update with explicit draws u1[d] ~ U(0,phi1),
// u2[d] ~ U(0,phi2).
void move_particle(Particle& particle, std::span<const double> global_best,
                   std::span<const double> u1, std::span<const double> u2, const SearchSpace& space,
                   std::span<const double> v_max, double inertia = 1.0);

// update_bests, then moves every particle with draws from the swarm's RNG.
void step(Swarm& swarm, const SearchSpace& space, std::span<const double> scores);

struct Assignment {
    std::vector<std::string> names;
    std::vector<double> values;

    double get(std::string_view name) const;  // throws ConfigError
    std::string to_string() const;
};

// Continuous dims pass through; integer dims round half away from zero, then
// clamp to the bounds.
Assignment decode_position(const SearchSpace& space, std::span<const double> position);

using Objective = std::function<double(std::span<const double> position)>;

struct TraceEntry {
    std::size_t iteration = 0;  // 1-based
    double best_score = 0.0;
    Assignment best;
};

struct OptimizeResult {
    Assignment best;
    std::vector<double> best_position;
    double best_score = 0.0;
    std::vector<TraceEntry> trace;
};

// init, then `iterations` rounds of evaluate + step. Evaluations inside a
// round may run on up to `jobs` threads; results do not depend on `jobs`.
OptimizeResult optimize(const SearchSpace& space, const Objective& objective, std::size_t swarm_size,
                        std::size_t iterations, std::uint64_t seed, const SwarmOptions& options = {},
                        std::size_t jobs = 1);

// iteration,best_score,<dim names...>
void write_trace_csv(std::ostream& out, const SearchSpace& space, const std::vector<TraceEntry>& trace);

} // namespace vehids
