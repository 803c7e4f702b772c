// SPDX-License-Identifier: Apache-2.0
//
// Merge recipes: a JSON file naming the base, the fine-tuned models, the
// method and its hyperparameters. Paths inside a recipe resolve against the
// --workdir given on the command line.

#pragma once

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsmerge::cli {

// Thrown for schema violations; maps to exit code 2.
class RecipeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SweepAxis {
    std::string name;  // k, p, topk or scaling
    std::vector<double> values;
};

struct Recipe {
    std::string method;
    std::string base;
    std::vector<std::string> models;
    std::vector<double> alphas;  // empty: shared alpha of 1
    double k = 1.0;
    double p = 0.0;
    double lambda = 1.0;
    double topk = 1.0;
    std::uint64_t seed = 0;
    std::string output = "merged.safetensors";
    std::string dtype_policy = "source";
    std::vector<std::string> exclude_patterns;
    bool sweep = false;
    std::vector<SweepAxis> sweep_axes;  // empty with sweep=true: the default grid
    nlohmann::json echo;                // the recipe as written
};

Recipe parse_recipe(const nlohmann::json & j);
Recipe load_recipe(const std::string & path);

// The grid searched for each method by default:
//   ties: k {0.4..0.9} x scaling {0.1..0.5}
//   dare: p {0.6,0.7,0.8,0.9} x scaling {0.1..0.5}
//   task_arithmetic: scaling {0.1..0.5}
//   sce: topk {0.1,0.3,0.5,0.7,0.9}
std::vector<SweepAxis> default_sweep(const std::string & method);

struct SweepCell {
    std::size_t index = 0;
    std::string label;  // e.g. "k0.4_scaling0.1"
    Recipe recipe;      // hyperparameters resolved for this cell
};

// Cartesian product, first axis slowest. "scaling" sets lambda for ties and
// a shared alpha for task_arithmetic and dare.
std::vector<SweepCell> expand_sweep(const Recipe & recipe);

// Sets the named hyperparameter on `recipe` (k, p, topk, lambda or scaling).
void apply_axis_value(Recipe & recipe, const std::string & axis, double value);

std::string format_value(double v);

} // namespace wsmerge::cli
