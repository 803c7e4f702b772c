// SPDX-License-Identifier: Apache-2.0

#include "selectivity_oracle.hpp"
#include "merge_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

namespace oracle {

namespace {

double ascending_sum(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

} // namespace

SelectivityResult selectivity(const std::map<std::string, LanguageCounts> & langs, std::size_t layers,
                              std::size_t width, double rho, bool absolute_tau, double tau) {
    const std::size_t cells = layers * width;
    std::map<std::string, std::vector<double>> p;
    for (const auto & [lang, lc] : langs) {
        for (std::size_t c = 0; c < cells; ++c) {
            p[lang].push_back(double(lc.counts[c]) / double(lc.total));
        }
    }

    SelectivityResult r;
    r.entropy.assign(cells, std::numeric_limits<double>::quiet_NaN());
    std::vector<std::tuple<double, std::size_t, std::size_t>> ranked;
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t k = 0; k < width; ++k) {
            const std::size_t c = l * width + k;
            std::vector<double> column;
            for (const auto & [lang, v] : p) column.push_back(v[c]);
            const double total = ascending_sum(column);
            for (const auto & [lang, v] : p) {
                r.q[lang].push_back(total > 0 ? v[c] / total : std::numeric_limits<double>::quiet_NaN());
            }
            if (!(total > 0)) continue;
            std::vector<double> terms;
            for (const auto & [lang, v] : p) {
                const double q = v[c] / total;
                if (q > 0) terms.push_back(-q * std::log(q));
            }
            r.entropy[c] = ascending_sum(terms);
            ranked.emplace_back(r.entropy[c], l, k);
        }
    }
    std::sort(ranked.begin(), ranked.end());

    if (absolute_tau) {
        r.tau = tau;
    } else {
        std::vector<double> pooled;
        for (const auto & [lang, v] : p) pooled.insert(pooled.end(), v.begin(), v.end());
        std::sort(pooled.begin(), pooled.end());
        std::size_t rank = keep_count(tau, pooled.size());
        rank = std::max<std::size_t>(1, std::min(rank, pooled.size()));
        r.tau = pooled[rank - 1];
    }

    for (const auto & [lang, v] : p) r.selected[lang].assign(layers, {});
    const std::size_t quota = floor_count(rho, cells);
    for (std::size_t i = 0; i < ranked.size() && i < quota; ++i) {
        const auto [h, l, k] = ranked[i];
        r.candidates.emplace_back(l, k);
        for (const auto & [lang, v] : p) {
            if (v[l * width + k] > r.tau) r.selected[lang][l].push_back(std::uint32_t(k));
        }
    }
    for (auto & [lang, per_layer] : r.selected) {
        for (auto & ks : per_layer) std::sort(ks.begin(), ks.end());
    }
    return r;
}

} // namespace oracle
