#include "volcast/surface_data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace volcast::data {

namespace {

struct P2 {
    double x, y;
};

struct Tri {
    int a, b, c;
    double ccx, ccy, rr; // circumcircle; rr < 0 marks a degenerate triangle
};

Tri make_tri(const std::vector<P2>& pts, int a, int b, int c) {
    const P2 &A = pts[size_t(a)], &B = pts[size_t(b)], &C = pts[size_t(c)];
    const double d = 2.0 * (A.x * (B.y - C.y) + B.x * (C.y - A.y) + C.x * (A.y - B.y));
    Tri t{a, b, c, 0.0, 0.0, -1.0};
    if (std::fabs(d) < 1e-14) return t;
    const double a2 = A.x * A.x + A.y * A.y;
    const double b2 = B.x * B.x + B.y * B.y;
    const double c2 = C.x * C.x + C.y * C.y;
    t.ccx = (a2 * (B.y - C.y) + b2 * (C.y - A.y) + c2 * (A.y - B.y)) / d;
    t.ccy = (a2 * (C.x - B.x) + b2 * (A.x - C.x) + c2 * (B.x - A.x)) / d;
    const double dx = A.x - t.ccx, dy = A.y - t.ccy;
    t.rr = dx * dx + dy * dy;
    return t;
}

// Incremental Bowyer-Watson. `pts` gains three far-away helper vertices;
// returned triangles reference only the original points.
std::vector<Tri> delaunay(std::vector<P2>& pts) {
    const int n = static_cast<int>(pts.size());
    double lo_x = pts[0].x, hi_x = pts[0].x, lo_y = pts[0].y, hi_y = pts[0].y;
    for (const auto& p : pts) {
        lo_x = std::min(lo_x, p.x); hi_x = std::max(hi_x, p.x);
        lo_y = std::min(lo_y, p.y); hi_y = std::max(hi_y, p.y);
    }
    const double cx = 0.5 * (lo_x + hi_x), cy = 0.5 * (lo_y + hi_y);
    const double r = std::max({hi_x - lo_x, hi_y - lo_y, 1.0});
    pts.push_back({cx - 20.0 * r, cy - r});
    pts.push_back({cx + 20.0 * r, cy - r});
    pts.push_back({cx, cy + 20.0 * r});

    std::vector<Tri> tris{make_tri(pts, n, n + 1, n + 2)};
    for (int i = 0; i < n; ++i) {
        const P2 p = pts[size_t(i)];
        auto collect_bad = [&](double slack) {
            std::vector<size_t> bad;
            for (size_t t = 0; t < tris.size(); ++t) {
                if (tris[t].rr < 0.0) continue;
                const double dx = p.x - tris[t].ccx, dy = p.y - tris[t].ccy;
                if (dx * dx + dy * dy < tris[t].rr + slack) bad.push_back(t);
            }
            return bad;
        };
        std::vector<size_t> bad = collect_bad(-1e-12);
        // exactly cocircular (lattice input): accept circle-boundary triangles
        if (bad.empty()) bad = collect_bad(1e-12);
        if (bad.empty()) continue; // coincident with an existing vertex

        std::map<std::pair<int, int>, std::pair<int, int>> edges; // sorted pair -> (count, original u)
        for (size_t t : bad) {
            const int v[3] = {tris[t].a, tris[t].b, tris[t].c};
            for (int e = 0; e < 3; ++e) {
                const int u = v[e], w = v[(e + 1) % 3];
                auto key = std::minmax(u, w);
                auto [it, fresh] = edges.try_emplace({key.first, key.second}, std::pair<int, int>{0, u});
                it->second.first++;
                (void)fresh;
            }
        }
        for (auto it = bad.rbegin(); it != bad.rend(); ++it) tris.erase(tris.begin() + static_cast<long>(*it));
        for (const auto& [key, info] : edges) {
            if (info.first != 1) continue; // interior edge of the cavity
            const int u = info.second, w = (key.first == u) ? key.second : key.first;
            tris.push_back(make_tri(pts, u, w, i));
        }
    }

    std::erase_if(tris, [n](const Tri& t) { return t.a >= n || t.b >= n || t.c >= n || t.rr < 0.0; });
    return tris;
}

// Solves the dense system in place by Gaussian elimination; returns false on
// (near-)singularity.
bool gauss_solve(std::vector<double>& m, std::vector<double>& rhs, int dim) {
    for (int col = 0; col < dim; ++col) {
        int pivot = col;
        for (int row = col + 1; row < dim; ++row)
            if (std::fabs(m[size_t(row * dim + col)]) > std::fabs(m[size_t(pivot * dim + col)])) pivot = row;
        if (std::fabs(m[size_t(pivot * dim + col)]) < 1e-12) return false;
        if (pivot != col) {
            for (int k = 0; k < dim; ++k) std::swap(m[size_t(col * dim + k)], m[size_t(pivot * dim + k)]);
            std::swap(rhs[size_t(col)], rhs[size_t(pivot)]);
        }
        for (int row = col + 1; row < dim; ++row) {
            const double factor = m[size_t(row * dim + col)] / m[size_t(col * dim + col)];
            for (int k = col; k < dim; ++k) m[size_t(row * dim + k)] -= factor * m[size_t(col * dim + k)];
            rhs[size_t(row)] -= factor * rhs[size_t(col)];
        }
    }
    for (int row = dim - 1; row >= 0; --row) {
        double acc = rhs[size_t(row)];
        for (int k = row + 1; k < dim; ++k) acc -= m[size_t(row * dim + k)] * rhs[size_t(k)];
        rhs[size_t(row)] = acc / m[size_t(row * dim + row)];
    }
    return true;
}

// Least-squares polynomial fit around vertex v over its nearest neighbors;
// returns the gradient of the fit at v. Quadratic basis when enough points,
// linear fallback otherwise.
std::pair<double, double> vertex_gradient(const std::vector<P2>& pts, const std::vector<double>& f, int v, int n) {
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const P2 center = pts[size_t(v)];
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double da = std::hypot(pts[size_t(a)].x - center.x, pts[size_t(a)].y - center.y);
        const double db = std::hypot(pts[size_t(b)].x - center.x, pts[size_t(b)].y - center.y);
        return da < db;
    });
    const int take = std::min(n, 13); // self + 12 nearest

    auto fit = [&](int dim) -> std::pair<bool, std::pair<double, double>> {
        std::vector<double> ata(static_cast<size_t>(dim * dim), 0.0);
        std::vector<double> atb(static_cast<size_t>(dim), 0.0);
        for (int idx = 0; idx < take; ++idx) {
            const int j = order[size_t(idx)];
            const double dx = pts[size_t(j)].x - center.x, dy = pts[size_t(j)].y - center.y;
            const double basis[6] = {1.0, dx, dy, dx * dx, dx * dy, dy * dy};
            for (int a = 0; a < dim; ++a) {
                for (int b = 0; b < dim; ++b) ata[size_t(a * dim + b)] += basis[a] * basis[b];
                atb[size_t(a)] += basis[a] * f[size_t(j)];
            }
        }
        if (!gauss_solve(ata, atb, dim)) return {false, {0.0, 0.0}};
        return {true, {atb[1], atb[2]}};
    };

    if (take >= 6) {
        if (auto [ok, g] = fit(6); ok) return g;
    }
    if (take >= 3) {
        if (auto [ok, g] = fit(3); ok) return g;
    }
    return {0.0, 0.0};
}

// Cubic Bezier triangle from vertex values and gradients; the interior
// control point is placed for exact reproduction of quadratics.
double cubic_patch(const P2& p0, const P2& p1, const P2& p2, const double fv[3],
                   const std::pair<double, double> g[3], double l0, double l1, double l2) {
    auto edge_pt = [](double f, const std::pair<double, double>& grad, const P2& from, const P2& to) {
        return f + (grad.first * (to.x - from.x) + grad.second * (to.y - from.y)) / 3.0;
    };
    const double b300 = fv[0], b030 = fv[1], b003 = fv[2];
    const double b210 = edge_pt(fv[0], g[0], p0, p1);
    const double b201 = edge_pt(fv[0], g[0], p0, p2);
    const double b120 = edge_pt(fv[1], g[1], p1, p0);
    const double b021 = edge_pt(fv[1], g[1], p1, p2);
    const double b102 = edge_pt(fv[2], g[2], p2, p0);
    const double b012 = edge_pt(fv[2], g[2], p2, p1);
    const double edge_sum = b210 + b201 + b120 + b021 + b102 + b012;
    const double b111 = edge_sum / 4.0 - (b300 + b030 + b003) / 6.0;

    return b300 * l0 * l0 * l0 + b030 * l1 * l1 * l1 + b003 * l2 * l2 * l2 +
           3.0 * (b210 * l0 * l0 * l1 + b201 * l0 * l0 * l2 + b120 * l0 * l1 * l1 +
                  b021 * l1 * l1 * l2 + b102 * l0 * l2 * l2 + b012 * l1 * l2 * l2) +
           6.0 * b111 * l0 * l1 * l2;
}

} // namespace

VolSurfaceGrid interpolate_surface(const std::vector<OptionQuote>& quotes, const GridAxes& axes) {
    if (quotes.empty()) throw DataError("no quotes to interpolate");
    const std::string date_text = to_string(quotes[0].date);
    if (quotes.size() < 16)
        throw DataError(date_text + ": " + std::to_string(quotes.size()) + " quotes; need at least 16");

    // Normalized coordinates: moneyness range to [0,1], maturity range to [0,1].
    const double m0 = axes.moneyness.front(), m_span = axes.moneyness.back() - axes.moneyness.front();
    const double t0 = axes.maturity.front(), t_span = axes.maturity.back() - axes.maturity.front();

    std::vector<P2> pts;
    std::vector<double> vals;
    std::vector<int> hits; // duplicate-location averaging
    double spot_sum = 0.0, rate_sum = 0.0;
    for (const auto& q : quotes) {
        spot_sum += q.spot;
        rate_sum += q.rate;
        const P2 p{(q.strike / q.spot - m0) / m_span, (q.maturity - t0) / t_span};
        bool merged = false;
        for (size_t i = 0; i < pts.size(); ++i) {
            if (std::fabs(pts[i].x - p.x) < 1e-12 && std::fabs(pts[i].y - p.y) < 1e-12) {
                vals[i] = (vals[i] * hits[i] + q.implied_vol) / (hits[i] + 1);
                hits[i]++;
                merged = true;
                break;
            }
        }
        if (!merged) {
            pts.push_back(p);
            vals.push_back(q.implied_vol);
            hits.push_back(1);
        }
    }

    const int n = static_cast<int>(pts.size());
    auto tris = delaunay(pts); // appends helper vertices to pts
    if (tris.empty()) throw DataError(date_text + ": degenerate quote geometry (no valid triangulation)");

    std::vector<std::pair<double, double>> grads(static_cast<size_t>(n));
    for (int v = 0; v < n; ++v) grads[size_t(v)] = vertex_gradient(pts, vals, v, n);

    VolSurfaceGrid grid;
    grid.date = quotes[0].date;
    grid.spot = spot_sum / static_cast<double>(quotes.size());
    grid.rate = rate_sum / static_cast<double>(quotes.size());

    for (int i = 0; i < kGridSize; ++i) {
        for (int j = 0; j < kGridSize; ++j) {
            const double x = (axes.moneyness[size_t(i)] - m0) / m_span;
            const double y = (axes.maturity[size_t(j)] - t0) / t_span;

            // A quote sitting on this knot is reproduced verbatim.
            double value = 0.0;
            bool inside = false;
            for (int v = 0; v < n && !inside; ++v) {
                const double dx = pts[size_t(v)].x - x, dy = pts[size_t(v)].y - y;
                if (dx * dx + dy * dy < 1e-24) {
                    value = vals[size_t(v)];
                    inside = true;
                }
            }
            for (const auto& t : tris) {
                if (inside) break;
                const P2 &A = pts[size_t(t.a)], &B = pts[size_t(t.b)], &C = pts[size_t(t.c)];
                const double det = (B.y - C.y) * (A.x - C.x) + (C.x - B.x) * (A.y - C.y);
                if (std::fabs(det) < 1e-15) continue;
                const double l0 = ((B.y - C.y) * (x - C.x) + (C.x - B.x) * (y - C.y)) / det;
                const double l1 = ((C.y - A.y) * (x - C.x) + (A.x - C.x) * (y - C.y)) / det;
                const double l2 = 1.0 - l0 - l1;
                if (l0 < -1e-9 || l1 < -1e-9 || l2 < -1e-9) continue;
                const double fv[3] = {vals[size_t(t.a)], vals[size_t(t.b)], vals[size_t(t.c)]};
                const std::pair<double, double> g[3] = {grads[size_t(t.a)], grads[size_t(t.b)], grads[size_t(t.c)]};
                value = cubic_patch(A, B, C, fv, g, l0, l1, l2);
                inside = true;
                break;
            }
            if (!inside) { // outside the hull: nearest quote's value
                double best = 1e300;
                for (int v = 0; v < n; ++v) {
                    const double dx = pts[size_t(v)].x - x, dy = pts[size_t(v)].y - y;
                    const double d2 = dx * dx + dy * dy;
                    if (d2 < best) {
                        best = d2;
                        value = vals[size_t(v)];
                    }
                }
            }
            grid.at(i, j) = std::clamp(value, kVolFloor, kVolCeil);
        }
    }
    return grid;
}

GridSeries ingest_quotes(const std::vector<OptionQuote>& quotes) {
    std::map<Date, std::vector<OptionQuote>> by_date;
    for (const auto& q : quotes) by_date[q.date].push_back(q);
    GridSeries series;
    series.axes = default_axes();
    for (const auto& [date, day_quotes] : by_date)
        series.days.push_back(interpolate_surface(day_quotes, series.axes));
    return series;
}

} // namespace volcast::data
