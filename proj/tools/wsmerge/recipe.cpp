// SPDX-License-Identifier: Apache-2.0

#include "recipe.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace wsmerge::cli {

namespace {

using json = nlohmann::json;

const std::set<std::string> kFields = {"method", "base",  "models", "alphas", "k",
                                       "p",      "lambda", "topk",  "seed",   "output",
                                       "dtype_policy", "exclude_patterns", "sweep", "sce_pivot"};

const std::vector<std::string> kMethods = {"task_arithmetic", "ties", "dare", "sce"};

[[noreturn]] void bad(const std::string & field, const std::string & what) {
    throw RecipeError("field '" + field + "': " + what);
}

double number(const json & j, const std::string & field) {
    if (!j.is_number()) {
        bad(field, "expected a number");
    }
    return j.get<double>();
}

std::string string(const json & j, const std::string & field) {
    if (!j.is_string()) {
        bad(field, "expected a string");
    }
    return j.get<std::string>();
}

std::vector<std::string> string_array(const json & j, const std::string & field) {
    if (!j.is_array()) {
        bad(field, "expected an array of strings");
    }
    std::vector<std::string> out;
    for (const auto & item : j) {
        out.push_back(string(item, field));
    }
    return out;
}

std::set<std::string> axes_for(const std::string & method) {
    if (method == "ties") return {"k", "scaling", "lambda"};
    if (method == "dare") return {"p", "scaling"};
    if (method == "task_arithmetic") return {"scaling"};
    return {"topk"};
}

const std::vector<double> kScaling = {0.1, 0.2, 0.3, 0.4, 0.5};

} // namespace

std::string format_value(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    std::string s = buf;
    // Prefer the shortest representation that round-trips.
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) {
            s = buf;
            break;
        }
    }
    return s;
}

Recipe parse_recipe(const json & j) {
    if (!j.is_object()) {
        throw RecipeError("recipe must be a JSON object");
    }
    for (const auto & [key, value] : j.items()) {
        if (kFields.count(key) == 0) {
            bad(key, "unknown field");
        }
    }
    Recipe r;
    r.echo = j;

    if (!j.contains("method")) bad("method", "required");
    r.method = string(j["method"], "method");
    if (std::find(kMethods.begin(), kMethods.end(), r.method) == kMethods.end()) {
        bad("method", "unknown merge method '" + r.method + "' (expected task_arithmetic, ties, dare or sce)");
    }
    if (!j.contains("base")) bad("base", "required");
    r.base = string(j["base"], "base");
    if (!j.contains("models")) bad("models", "required");
    r.models = string_array(j["models"], "models");
    if (r.models.empty()) {
        bad("models", "at least one model is required");
    }

    if (j.contains("alphas")) {
        const json & a = j["alphas"];
        if (a.is_number()) {
            r.alphas.assign(r.models.size(), a.get<double>());
        } else if (a.is_array()) {
            for (const auto & v : a) {
                r.alphas.push_back(number(v, "alphas"));
            }
            if (r.alphas.size() != r.models.size()) {
                bad("alphas", "expected " + std::to_string(r.models.size()) + " values, got " +
                                  std::to_string(r.alphas.size()));
            }
        } else {
            bad("alphas", "expected a number or an array of numbers");
        }
    }
    if (j.contains("k")) r.k = number(j["k"], "k");
    if (j.contains("p")) r.p = number(j["p"], "p");
    if (j.contains("lambda")) r.lambda = number(j["lambda"], "lambda");
    if (j.contains("topk")) r.topk = number(j["topk"], "topk");
    if (j.contains("seed")) {
        const json & s = j["seed"];
        if (!s.is_number_unsigned()) {
            bad("seed", "expected a non-negative integer");
        }
        r.seed = s.get<std::uint64_t>();
    }
    if (j.contains("output")) {
        r.output = string(j["output"], "output");
        if (r.output.empty()) bad("output", "must not be empty");
    }
    if (j.contains("dtype_policy")) {
        r.dtype_policy = string(j["dtype_policy"], "dtype_policy");
        if (r.dtype_policy != "source" && r.dtype_policy != "f32" && r.dtype_policy != "f16" &&
            r.dtype_policy != "bf16") {
            bad("dtype_policy", "unknown policy '" + r.dtype_policy + "' (expected source, f32, f16 or bf16)");
        }
    }
    if (j.contains("exclude_patterns")) {
        r.exclude_patterns = string_array(j["exclude_patterns"], "exclude_patterns");
    }
    if (j.contains("sce_pivot")) {
        const std::string pivot = string(j["sce_pivot"], "sce_pivot");
        if (pivot != "base") {
            bad("sce_pivot", "only 'base' is supported");
        }
    }
    if (j.contains("sweep")) {
        const json & s = j["sweep"];
        if (s.is_boolean()) {
            r.sweep = s.get<bool>();
        } else if (s.is_object()) {
            r.sweep = true;
            const auto allowed = axes_for(r.method);
            for (const auto & [axis, values] : s.items()) {
                if (allowed.count(axis) == 0) {
                    bad("sweep." + axis, "not a sweepable parameter for method " + r.method);
                }
                if (!values.is_array() || values.empty()) {
                    bad("sweep." + axis, "expected a non-empty array of numbers");
                }
                SweepAxis ax{axis, {}};
                for (const auto & v : values) {
                    ax.values.push_back(number(v, "sweep." + axis));
                }
                r.sweep_axes.push_back(std::move(ax));
            }
            if (r.sweep_axes.empty()) {
                bad("sweep", "no axes given");
            }
        } else {
            bad("sweep", "expected a boolean or an object of value lists");
        }
    }
    return r;
}

Recipe load_recipe(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::ios_base::failure("cannot open recipe " + path);
    }
    std::stringstream buf;
    buf << in.rdbuf();
    json j;
    try {
        j = json::parse(buf.str());
    } catch (const json::exception & e) {
        throw RecipeError("recipe " + path + " is not valid JSON: " + e.what());
    }
    return parse_recipe(j);
}

std::vector<SweepAxis> default_sweep(const std::string & method) {
    if (method == "ties") {
        return {{"k", {0.4, 0.5, 0.6, 0.7, 0.8, 0.9}}, {"scaling", kScaling}};
    }
    if (method == "dare") {
        return {{"p", {0.6, 0.7, 0.8, 0.9}}, {"scaling", kScaling}};
    }
    if (method == "task_arithmetic") {
        return {{"scaling", kScaling}};
    }
    return {{"topk", {0.1, 0.3, 0.5, 0.7, 0.9}}};
}

void apply_axis_value(Recipe & recipe, const std::string & axis, double value) {
    if (axis == "k") {
        recipe.k = value;
    } else if (axis == "p") {
        recipe.p = value;
    } else if (axis == "topk") {
        recipe.topk = value;
    } else if (axis == "lambda") {
        recipe.lambda = value;
    } else if (axis == "scaling") {
        if (recipe.method == "ties") {
            recipe.lambda = value;
        } else {
            recipe.alphas.assign(recipe.models.size(), value);
        }
    } else {
        bad("sweep." + axis, "unknown axis");
    }
}

std::vector<SweepCell> expand_sweep(const Recipe & recipe) {
    const std::vector<SweepAxis> axes = recipe.sweep_axes.empty() ? default_sweep(recipe.method) : recipe.sweep_axes;
    std::size_t total = 1;
    for (const auto & ax : axes) {
        total *= ax.values.size();
    }
    std::vector<SweepCell> cells;
    cells.reserve(total);
    for (std::size_t index = 0; index < total; ++index) {
        SweepCell cell;
        cell.index = index;
        cell.recipe = recipe;
        cell.recipe.sweep = false;
        cell.recipe.sweep_axes.clear();
        std::size_t rem = index;
        std::vector<std::size_t> pick(axes.size());
        for (std::size_t a = axes.size(); a-- > 0;) {
            pick[a] = rem % axes[a].values.size();
            rem /= axes[a].values.size();
        }
        for (std::size_t a = 0; a < axes.size(); ++a) {
            const double v = axes[a].values[pick[a]];
            apply_axis_value(cell.recipe, axes[a].name, v);
            if (!cell.label.empty()) {
                cell.label += "_";
            }
            cell.label += axes[a].name + format_value(v);
        }
        cells.push_back(std::move(cell));
    }
    return cells;
}

} // namespace wsmerge::cli
