#include "volcast/surface_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace volcast::data {

GridAxes default_axes() {
    GridAxes axes;
    for (int i = 0; i < kGridSize; ++i) {
        axes.moneyness[static_cast<size_t>(i)] = 0.9 + 0.2 * i / (kGridSize - 1);
        axes.maturity[static_cast<size_t>(i)] = 0.05 + 0.95 * i / (kGridSize - 1);
    }
    return axes;
}

MarketMatrices market_matrices(const VolSurfaceGrid& day, const GridAxes& axes) {
    MarketMatrices m{ad::Tensor::zeros({kGridSize, kGridSize}), ad::Tensor::zeros({kGridSize, kGridSize}),
                     ad::Tensor::zeros({kGridSize, kGridSize}), ad::Tensor::zeros({kGridSize, kGridSize})};
    for (int i = 0; i < kGridSize; ++i)
        for (int j = 0; j < kGridSize; ++j) {
            m.tau.at({i, j}) = axes.maturity[static_cast<size_t>(j)];
            m.spot.at({i, j}) = day.spot;
            m.rate.at({i, j}) = day.rate;
            m.strike.at({i, j}) = axes.moneyness[static_cast<size_t>(i)] * day.spot;
        }
    return m;
}

ad::Tensor grid_tensor(const VolSurfaceGrid& g) {
    return ad::Tensor({1, kGridSize, kGridSize}, std::vector<double>(g.values.begin(), g.values.end()));
}

namespace {

void require_sorted(const GridSeries& series) {
    for (size_t i = 1; i < series.days.size(); ++i)
        if (!(series.days[i - 1].date < series.days[i].date))
            throw DataError("series dates not strictly increasing at " + to_string(series.days[i].date));
}

// Index range [first, last) of series days inside an inclusive date range.
std::pair<size_t, size_t> range_indices(const GridSeries& series, const DateRange& range) {
    size_t first = series.days.size(), last = 0;
    for (size_t i = 0; i < series.days.size(); ++i) {
        if (range.contains(series.days[i].date)) {
            first = std::min(first, i);
            last = i + 1;
        }
    }
    if (first >= last) return {0, 0};
    return {first, last};
}

} // namespace

DatasetSplit make_split(const GridSeries& series, const DateRange& train_range, const DateRange& test_range) {
    require_sorted(series);
    auto [first, last] = range_indices(series, train_range);
    const size_t n = last - first;
    if (n < 2)
        throw DataError("series covers only " + std::to_string(n) + " training days in " +
                        to_string(train_range.start) + ".." + to_string(train_range.end));
    const size_t n_val = std::max<size_t>(1, n / 5); // latest 20% of training dates
    DatasetSplit split;
    split.train = {series.days[first].date, series.days[last - n_val - 1].date};
    split.validation = {series.days[last - n_val].date, series.days[last - 1].date};
    split.test = test_range;
    return split;
}

Dataset build_dataset(const GridSeries& series, const DatasetSplit& split, int window) {
    if (window < 1) throw ConfigError("window must be >= 1, got " + std::to_string(window));
    require_sorted(series);
    Dataset out;

    struct Part {
        const char* name;
        const DateRange* range;
        std::vector<WindowedSample>* samples;
    };
    const Part parts[] = {{"train", &split.train, &out.train},
                          {"validation", &split.validation, &out.validation},
                          {"test", &split.test, &out.test}};
    for (const auto& part : parts) {
        auto [first, last] = range_indices(series, *part.range);
        const size_t n = last - first;
        if (n < static_cast<size_t>(window) + 1) {
            out.warnings.push_back(std::string(part.name) + " split has " + std::to_string(n) +
                                   " days, fewer than window+1 = " + std::to_string(window + 1) +
                                   "; no samples");
            continue;
        }
        for (size_t t = first + static_cast<size_t>(window); t < last; ++t) {
            WindowedSample s;
            for (size_t k = t - static_cast<size_t>(window); k < t; ++k)
                s.inputs.push_back(grid_tensor(series.days[k]));
            s.target = grid_tensor(series.days[t]);
            s.target_grid = ad::Tensor({kGridSize, kGridSize},
                                       std::vector<double>(series.days[t].values.begin(),
                                                           series.days[t].values.end()));
            s.market = market_matrices(series.days[t], series.axes);
            s.date = series.days[t].date;
            part.samples->push_back(std::move(s));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

namespace {

double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53; // [0, 1)
}

// Box-Muller on raw uniform bits: identical streams on every platform.
double gaussian(std::mt19937_64& rng) {
    const double u1 = 1.0 - uniform01(rng); // (0, 1]
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

} // namespace

GridSeries synthetic_series(const SyntheticConfig& config, uint64_t seed) {
    if (config.days < 1) throw ConfigError("synthetic series needs days >= 1");
    if (config.spot0 <= 0.0) throw ConfigError("synthetic spot0 must be positive");
    if (config.season_period <= 0.0) throw ConfigError("synthetic season_period must be positive");
    if (config.mean_reversion < 0.0 || config.mean_reversion > 1.0)
        throw ConfigError("synthetic mean_reversion must lie in [0, 1]");
    if (config.level_noise < 0.0) throw ConfigError("synthetic level_noise must be nonnegative");
    for (const auto& shock : config.shocks)
        if (shock.half_life <= 0.0) throw ConfigError("shock half_life must be positive");

    std::mt19937_64 rng(seed);
    GridSeries series;
    series.axes = default_axes();
    series.days.reserve(static_cast<size_t>(config.days));

    double level_core = config.base_level;
    double spot = config.spot0;
    Date date = is_weekday(config.start) ? config.start : next_weekday(config.start);
    const double dt = 1.0 / 252.0;

    for (int t = 0; t < config.days; ++t) {
        double shock_sum = 0.0;
        for (const auto& shock : config.shocks)
            if (t >= shock.day)
                shock_sum += shock.magnitude * std::exp2(-(t - shock.day) / shock.half_life);
        const double level = level_core + shock_sum +
                             config.season_amplitude * std::sin(2.0 * std::numbers::pi * t / config.season_period);

        VolSurfaceGrid grid;
        grid.date = date;
        grid.spot = spot;
        grid.rate = config.rate;
        for (int i = 0; i < kGridSize; ++i) {
            const double dm = series.axes.moneyness[static_cast<size_t>(i)] - 1.0;
            for (int j = 0; j < kGridSize; ++j) {
                const double v = level + config.curvature * dm * dm +
                                 config.term_slope * series.axes.maturity[static_cast<size_t>(j)];
                if (v < kVolFloor || v > kVolCeil)
                    throw ConfigError("synthetic config produced vol " + std::to_string(v) + " outside [" +
                                      std::to_string(kVolFloor) + ", " + std::to_string(kVolCeil) + "] on day " +
                                      std::to_string(t));
                grid.at(i, j) = v;
            }
        }
        series.days.push_back(grid);

        const double z_level = gaussian(rng);
        const double z_spot = gaussian(rng);
        level_core += config.mean_reversion * (config.base_level - level_core) + config.level_noise * z_level;
        spot *= std::exp((config.rate - 0.5 * level * level) * dt + level * std::sqrt(dt) * z_spot);
        date = next_weekday(date);
    }
    return series;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kSeriesMagic = "volcast-grid-series";
constexpr const char* kSeriesVersion = "v1";

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

[[noreturn]] void parse_fail(const std::filesystem::path& path, int line, const std::string& what) {
    throw DataError(path.string() + ":" + std::to_string(line) + ": " + what);
}

} // namespace

void save_series(const std::filesystem::path& path, const GridSeries& series) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out << kSeriesMagic << " " << kSeriesVersion << "\n";
    out << "days " << series.days.size() << "\n";
    out << "moneyness";
    for (double v : series.axes.moneyness) out << " " << fmt(v);
    out << "\nmaturity";
    for (double v : series.axes.maturity) out << " " << fmt(v);
    out << "\n";
    for (const auto& day : series.days) {
        out << "day " << to_string(day.date) << " spot " << fmt(day.spot) << " rate " << fmt(day.rate) << "\n";
        for (int i = 0; i < kGridSize; ++i) {
            for (int j = 0; j < kGridSize; ++j)
                out << (j ? " " : "") << fmt(day.at(i, j));
            out << "\n";
        }
    }
    if (!out) throw DataError("write failed for " + path.string());
}

GridSeries load_series(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    int lineno = 0;
    std::string line;
    auto next_line = [&]() {
        if (!std::getline(in, line)) parse_fail(path, lineno, "unexpected end of file");
        ++lineno;
    };

    next_line();
    {
        std::istringstream head(line);
        std::string magic, version;
        head >> magic >> version;
        if (magic != kSeriesMagic) parse_fail(path, lineno, "not a grid series file");
        if (version != kSeriesVersion)
            parse_fail(path, lineno, "unsupported version '" + version + "' (expected " + kSeriesVersion + ")");
    }

    GridSeries series;
    size_t day_count = 0;
    next_line();
    {
        std::istringstream hd(line);
        std::string key;
        if (!(hd >> key >> day_count) || key != "days") parse_fail(path, lineno, "expected 'days <count>'");
    }
    auto read_axis = [&](const char* name, std::array<double, kGridSize>& axis) {
        next_line();
        std::istringstream ax(line);
        std::string key;
        ax >> key;
        if (key != name) parse_fail(path, lineno, std::string("expected '") + name + "' axis");
        for (auto& v : axis)
            if (!(ax >> v)) parse_fail(path, lineno, std::string(name) + " axis needs 20 values");
        double extra;
        if (ax >> extra) parse_fail(path, lineno, std::string(name) + " axis has more than 20 values");
    };
    read_axis("moneyness", series.axes.moneyness);
    read_axis("maturity", series.axes.maturity);

    series.days.reserve(day_count);
    for (size_t d = 0; d < day_count; ++d) {
        next_line();
        std::istringstream hd(line);
        std::string key, date_text, spot_key, rate_key;
        VolSurfaceGrid grid;
        if (!(hd >> key >> date_text >> spot_key >> grid.spot >> rate_key >> grid.rate) ||
            key != "day" || spot_key != "spot" || rate_key != "rate")
            parse_fail(path, lineno, "expected 'day <date> spot <value> rate <value>'");
        grid.date = parse_date(date_text);
        for (int i = 0; i < kGridSize; ++i) {
            next_line();
            std::istringstream row(line);
            for (int j = 0; j < kGridSize; ++j) {
                if (!(row >> grid.at(i, j)))
                    parse_fail(path, lineno, "day " + date_text + ": row " + std::to_string(i) +
                                                 " has fewer than 20 values");
            }
            double extra;
            if (row >> extra)
                parse_fail(path, lineno, "day " + date_text + ": row " + std::to_string(i) +
                                             " has more than 20 values");
        }
        for (double v : grid.values)
            if (!std::isfinite(v) || v < kVolFloor || v > kVolCeil)
                parse_fail(path, lineno, "day " + date_text + ": vol " + fmt(v) + " outside [" +
                                             fmt(kVolFloor) + ", " + fmt(kVolCeil) + "]");
        series.days.push_back(grid);
    }
    return series;
}

std::vector<OptionQuote> load_quotes(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<OptionQuote> quotes;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string cleaned = line;
        std::replace(cleaned.begin(), cleaned.end(), ',', ' ');
        std::istringstream row(cleaned);
        std::string date_text;
        if (!(row >> date_text)) continue;                       // blank line
        if (date_text[0] == '#' || date_text == "date") continue; // comment or header
        OptionQuote q;
        q.date = parse_date(date_text);
        if (!(row >> q.strike >> q.maturity >> q.spot >> q.rate >> q.implied_vol))
            parse_fail(path, lineno, "expected date, strike, maturity_years, spot, rate, implied_vol");
        if (q.strike <= 0.0 || q.spot <= 0.0)
            parse_fail(path, lineno, "strike and spot must be positive");
        if (q.maturity <= 0.0 || q.maturity > 3.0)
            parse_fail(path, lineno, "maturity must lie in (0, 3] years");
        if (q.implied_vol < 0.001 || q.implied_vol > 5.0)
            parse_fail(path, lineno, "implied vol must lie in [0.001, 5.0]");
        quotes.push_back(q);
    }
    return quotes;
}

} // namespace volcast::data
