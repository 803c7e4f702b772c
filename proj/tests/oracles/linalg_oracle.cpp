// SPDX-License-Identifier: Apache-2.0

#include "linalg_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace oracle {

namespace {

Dense gram_cols(const Dense & x, const Dense & y) {
    Dense g(x.cols, y.cols);
    for (std::size_t i = 0; i < x.cols; ++i) {
        for (std::size_t j = 0; j < y.cols; ++j) {
            double s = 0.0;
            for (std::size_t n = 0; n < x.rows; ++n) s += x(n, i) * y(n, j);
            g(i, j) = s;
        }
    }
    return g;
}

double frob2(const Dense & m) {
    double s = 0.0;
    for (double x : m.v) s += x * x;
    return s;
}

Dense top_subspace(const Dense & h, std::size_t r) {
    const Dense c = centered(h);
    std::vector<double> values;
    Dense vectors;
    jacobi_eigen(gram_cols(c, c), values, vectors);
    Dense q(c.cols, r);
    for (std::size_t i = 0; i < c.cols; ++i) {
        for (std::size_t j = 0; j < r; ++j) q(i, j) = vectors(i, j);
    }
    modified_gram_schmidt(q);
    return q;
}

} // namespace

Dense centered(const Dense & h) {
    Dense c = h;
    for (std::size_t j = 0; j < h.cols; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < h.rows; ++i) mean += h(i, j);
        mean /= double(h.rows);
        for (std::size_t i = 0; i < h.rows; ++i) c(i, j) = h(i, j) - mean;
    }
    return c;
}

double cka(const Dense & a, const Dense & b) {
    const Dense x = centered(a);
    const Dense y = centered(b);
    return frob2(gram_cols(x, y)) / (std::sqrt(frob2(gram_cols(x, x))) * std::sqrt(frob2(gram_cols(y, y))));
}

void jacobi_eigen(const Dense & sym, std::vector<double> & values, Dense & vectors) {
    const std::size_t n = sym.rows;
    Dense a = sym;
    Dense v(n, n);
    for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0, diag = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            diag += a(i, i) * a(i, i);
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        }
        if (off <= 1e-32 * diag || off == 0.0) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
    values.assign(n, 0.0);
    vectors = Dense(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        values[j] = a(order[j], order[j]);
        for (std::size_t i = 0; i < n; ++i) vectors(i, j) = v(i, order[j]);
    }
}

void modified_gram_schmidt(Dense & m) {
    for (std::size_t j = 0; j < m.cols; ++j) {
        for (std::size_t k = 0; k < j; ++k) {
            double dot = 0.0;
            for (std::size_t i = 0; i < m.rows; ++i) dot += m(i, k) * m(i, j);
            for (std::size_t i = 0; i < m.rows; ++i) m(i, j) -= dot * m(i, k);
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < m.rows; ++i) norm += m(i, j) * m(i, j);
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < m.rows; ++i) m(i, j) /= norm;
    }
}

std::vector<double> principal_angles(const Dense & a, const Dense & b, std::size_t r) {
    const Dense qa = top_subspace(a, r);
    const Dense qb = top_subspace(b, r);
    const Dense m = gram_cols(qa, qb);  // r x r
    const Dense mtm = gram_cols(m, m);
    std::vector<double> lambda;
    Dense unused;
    jacobi_eigen(mtm, lambda, unused);
    std::vector<double> angles;
    for (double l : lambda) {
        const double sigma = std::min(1.0, std::sqrt(std::max(0.0, l)));
        angles.push_back(std::acos(sigma));
    }
    std::sort(angles.begin(), angles.end());
    return angles;
}

} // namespace oracle
