#include <doctest.h>

#include "volcast/surface_data.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

using namespace volcast;
using namespace volcast::data;

namespace {

struct TempFile {
    std::filesystem::path path;
    explicit TempFile(const char* name) {
        path = std::filesystem::temp_directory_path() / (std::string("volcast_test_") + name);
    }
    ~TempFile() {
        std::error_code ec;
        std::filesystem::remove(path, ec);
    }
};

std::vector<OptionQuote> lattice_quotes(int nm, int nt, double m_lo, double m_hi, double t_lo, double t_hi,
                                        double (*smile)(double, double)) {
    std::vector<OptionQuote> quotes;
    const Date day{2020, 3, 2};
    const double spot = 100.0, rate = 0.02;
    for (int i = 0; i < nm; ++i)
        for (int j = 0; j < nt; ++j) {
            const double m = m_lo + (m_hi - m_lo) * i / (nm - 1);
            const double tau = t_lo + (t_hi - t_lo) * j / (nt - 1);
            quotes.push_back({day, m * spot, tau, spot, rate, smile(m, tau)});
        }
    return quotes;
}

} // namespace

TEST_CASE("calendar: civil conversions round-trip and anchor correctly") {
    CHECK(days_from_civil({1970, 1, 1}) == 0);
    CHECK(civil_from_days(0) == Date{1970, 1, 1});
    for (int z = -20000; z <= 40000; z += 37)
        CHECK(days_from_civil(civil_from_days(z)) == z);
    CHECK(is_weekday({2004, 1, 5}));      // a Monday
    CHECK_FALSE(is_weekday({2004, 1, 4})); // the Sunday before
    CHECK(next_weekday({2004, 1, 2}) == Date{2004, 1, 5}); // Friday -> Monday
    CHECK(parse_date("2004-01-05") == Date{2004, 1, 5});
    CHECK(parse_date("2004/1/5") == Date{2004, 1, 5});
    CHECK(to_string(Date{2004, 1, 5}) == "2004-01-05");
    CHECK_THROWS_AS(parse_date("2004.1.5"), DataError);
    CHECK_THROWS_AS(parse_date("2023-02-29"), DataError);
}

TEST_CASE("default axes span the documented knot ranges") {
    const auto axes = default_axes();
    CHECK(axes.moneyness.front() == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(axes.moneyness.back() == doctest::Approx(1.1).epsilon(1e-15));
    CHECK(axes.maturity.front() == doctest::Approx(0.05).epsilon(1e-15));
    CHECK(axes.maturity.back() == doctest::Approx(1.0).epsilon(1e-15));
    for (int i = 1; i < kGridSize; ++i) {
        CHECK(axes.moneyness[size_t(i)] - axes.moneyness[size_t(i - 1)] ==
              doctest::Approx(0.2 / 19).epsilon(1e-12));
        CHECK(axes.maturity[size_t(i)] - axes.maturity[size_t(i - 1)] ==
              doctest::Approx(0.95 / 19).epsilon(1e-12));
    }
}

TEST_CASE("interpolation reproduces quotes that sit exactly on knots") {
    const auto axes = default_axes();
    std::vector<OptionQuote> quotes;
    const Date day{2020, 3, 2};
    auto value = [](double m, double tau) { return 0.2 + 0.3 * (m - 1.0) * (m - 1.0) + 0.05 * tau; };
    for (int i = 0; i < kGridSize; ++i)
        for (int j = 0; j < kGridSize; ++j) {
            const double m = axes.moneyness[size_t(i)], tau = axes.maturity[size_t(j)];
            quotes.push_back({day, m * 100.0, tau, 100.0, 0.02, value(m, tau)});
        }
    const auto grid = interpolate_surface(quotes, axes);
    for (int i = 0; i < kGridSize; ++i)
        for (int j = 0; j < kGridSize; ++j)
            CHECK(grid.at(i, j) == value(axes.moneyness[size_t(i)], axes.maturity[size_t(j)]));
}

TEST_CASE("interpolation is exact on affine smiles inside the hull") {
    const auto axes = default_axes();
    const auto quotes = lattice_quotes(12, 9, 0.88, 1.12, 0.03, 1.05,
                                       [](double m, double tau) { return 0.2 + 0.1 * m + 0.05 * tau; });
    const auto grid = interpolate_surface(quotes, axes);
    for (int i = 0; i < kGridSize; ++i)
        for (int j = 0; j < kGridSize; ++j) {
            const double expect = 0.2 + 0.1 * axes.moneyness[size_t(i)] + 0.05 * axes.maturity[size_t(j)];
            CHECK(std::fabs(grid.at(i, j) - expect) < 1e-10);
        }
}

TEST_CASE("interpolation error below 1e-3 on a smooth curved smile") {
    const auto axes = default_axes();
    auto smile = [](double m, double tau) {
        return 0.2 + 0.5 * (m - 1.0) * (m - 1.0) + 0.04 * tau + 0.02 * std::sin(3.0 * m) * std::cos(2.0 * tau);
    };
    const auto quotes = lattice_quotes(14, 10, 0.88, 1.12, 0.03, 1.05, smile);
    const auto grid = interpolate_surface(quotes, axes);
    double worst = 0.0;
    for (int i = 0; i < kGridSize; ++i)
        for (int j = 0; j < kGridSize; ++j)
            worst = std::max(worst, std::fabs(grid.at(i, j) -
                                              smile(axes.moneyness[size_t(i)], axes.maturity[size_t(j)])));
    CHECK(worst < 1e-3);
}

TEST_CASE("interpolation rejects thin or degenerate quote sets with the date named") {
    const auto axes = default_axes();
    std::vector<OptionQuote> few(10, OptionQuote{{2020, 3, 2}, 100.0, 0.5, 100.0, 0.02, 0.2});
    CHECK_THROWS_WITH_AS(interpolate_surface(few, axes), doctest::Contains("2020-03-02"), DataError);

    std::vector<OptionQuote> collinear;
    for (int i = 0; i < 20; ++i)
        collinear.push_back({{2020, 3, 3}, 100.0, 0.05 + 0.05 * i, 100.0, 0.02, 0.2}); // single strike line
    CHECK_THROWS_WITH_AS(interpolate_surface(collinear, axes), doctest::Contains("2020-03-03"), DataError);
}

TEST_CASE("synthetic series: deterministic, flat degenerate case, smile minimum") {
    SyntheticConfig cfg;
    cfg.days = 40;
    const auto a = synthetic_series(cfg, 7);
    const auto b = synthetic_series(cfg, 7);
    REQUIRE(a.days.size() == 40);
    for (size_t d = 0; d < a.days.size(); ++d) {
        CHECK(a.days[d].date == b.days[d].date);
        CHECK(a.days[d].spot == b.days[d].spot);
        CHECK(a.days[d].values == b.days[d].values);
    }

    SyntheticConfig flat;
    flat.days = 5;
    flat.curvature = 0.0;
    flat.term_slope = 0.0;
    flat.level_noise = 0.0;
    flat.season_amplitude = 0.0;
    const auto f = synthetic_series(flat, 1);
    for (const auto& day : f.days)
        for (double v : day.values) CHECK(v == doctest::Approx(flat.base_level).epsilon(1e-12));

    // positive curvature: the per-day minimum over moneyness sits at a knot nearest m=1
    for (const auto& day : a.days)
        for (int j = 0; j < kGridSize; ++j) {
            int argmin = 0;
            for (int i = 1; i < kGridSize; ++i)
                if (day.at(i, j) < day.at(argmin, j)) argmin = i;
            CHECK((argmin == 9 || argmin == 10)); // knots 9 and 10 straddle m=1 symmetrically
        }
}

TEST_CASE("synthetic level mean-reverts to the configured base over 500+ days") {
    SyntheticConfig cfg;
    cfg.days = 600;
    cfg.season_amplitude = 0.0;
    const auto series = synthetic_series(cfg, 3);
    // recover level_t from the grid: value at (i,j) minus curvature and slope parts
    const auto axes = series.axes;
    double mean_level = 0.0;
    for (const auto& day : series.days) {
        const double dm = axes.moneyness[0] - 1.0;
        mean_level += day.at(0, 0) - cfg.curvature * dm * dm - cfg.term_slope * axes.maturity[0];
    }
    mean_level /= static_cast<double>(series.days.size());
    CHECK(std::fabs(mean_level - cfg.base_level) / cfg.base_level < 0.05);
}

TEST_CASE("synthetic config that escapes the vol range is rejected") {
    SyntheticConfig cfg;
    cfg.days = 3;
    cfg.base_level = 1.99; // + slope * tau pushes past 2.0
    CHECK_THROWS_AS(synthetic_series(cfg, 1), ConfigError);
    SyntheticConfig neg;
    neg.days = 0;
    CHECK_THROWS_AS(synthetic_series(neg, 1), ConfigError);
}

TEST_CASE("build_dataset: window arithmetic and split isolation") {
    SyntheticConfig cfg;
    cfg.days = 30;
    const auto series = synthetic_series(cfg, 5);
    DatasetSplit whole{{series.days.front().date, series.days.back().date},
                       {Date{1900, 1, 1}, Date{1900, 1, 2}},
                       {Date{1900, 1, 3}, Date{1900, 1, 4}}};
    const auto ds = build_dataset(series, whole, 10);
    CHECK(ds.train.size() == 20); // 30 days, window 10 -> targets on days 11..30
    CHECK(ds.train.front().date == series.days[10].date);
    CHECK(ds.train.back().date == series.days[29].date);
    CHECK(ds.validation.empty());
    CHECK(ds.test.empty());
    CHECK(ds.warnings.size() == 2); // both degenerate ranges warned

    // windows never straddle a split boundary
    SyntheticConfig cfg2;
    cfg2.days = 60;
    const auto series2 = synthetic_series(cfg2, 6);
    const Date boundary = series2.days[39].date;
    DatasetSplit split{{series2.days.front().date, boundary},
                       {Date{1900, 1, 1}, Date{1900, 1, 2}},
                       {series2.days[40].date, series2.days.back().date}};
    const auto ds2 = build_dataset(series2, split, 10);
    CHECK(ds2.train.size() == 30);
    CHECK(ds2.test.size() == 10);
    for (const auto& s : ds2.test) CHECK(series2.days[50].date <= s.date); // window fits fully after boundary
}

TEST_CASE("make_split carves the latest 20% of training dates as validation") {
    SyntheticConfig cfg;
    cfg.days = 110;
    const auto series = synthetic_series(cfg, 8);
    const DateRange train_range{series.days[0].date, series.days[99].date};
    const DateRange test_range{series.days[100].date, series.days[109].date};
    const auto split = make_split(series, train_range, test_range);

    int train_days = 0, val_days = 0;
    for (const auto& day : series.days) {
        train_days += split.train.contains(day.date);
        val_days += split.validation.contains(day.date);
    }
    CHECK(train_days == 80);
    CHECK(val_days == 20);
    CHECK(split.train.end < split.validation.start);
    CHECK(split.validation.end < split.test.start);
}

TEST_CASE("series file round-trips losslessly") {
    SyntheticConfig cfg;
    cfg.days = 12;
    const auto series = synthetic_series(cfg, 9);
    TempFile tmp("roundtrip.txt");
    save_series(tmp.path, series);
    const auto loaded = load_series(tmp.path);
    REQUIRE(loaded.days.size() == series.days.size());
    CHECK(loaded.axes.moneyness == series.axes.moneyness);
    CHECK(loaded.axes.maturity == series.axes.maturity);
    for (size_t d = 0; d < series.days.size(); ++d) {
        CHECK(loaded.days[d].date == series.days[d].date);
        CHECK(loaded.days[d].spot == series.days[d].spot);
        CHECK(loaded.days[d].rate == series.days[d].rate);
        CHECK(loaded.days[d].values == series.days[d].values); // to the last bit
    }
}

TEST_CASE("series file validation: short record, bad version, bad vol") {
    SyntheticConfig cfg;
    cfg.days = 2;
    const auto series = synthetic_series(cfg, 10);
    TempFile tmp("malformed.txt");

    save_series(tmp.path, series);
    {
        std::ifstream in(tmp.path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const auto pos = text.rfind(' ');
        text.erase(pos); // drop the last value of the last row -> 399 values
        std::ofstream out(tmp.path);
        out << text;
    }
    CHECK_THROWS_WITH_AS(load_series(tmp.path), doctest::Contains(to_string(series.days[1].date).c_str()),
                         DataError);

    {
        std::ofstream out(tmp.path);
        out << "volcast-grid-series v9\ndays 0\n";
    }
    CHECK_THROWS_WITH_AS(load_series(tmp.path), doctest::Contains("unsupported version"), DataError);

    save_series(tmp.path, series);
    {
        std::ifstream in(tmp.path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        while (!text.empty() && text.back() == '\n') text.pop_back();
        const auto row_start = text.rfind('\n') + 1;
        std::string row = "9.9"; // vol outside [0.01, 2.0]
        for (int k = 1; k < 20; ++k) row += " 0.2";
        text.replace(row_start, text.size() - row_start, row + "\n");
        std::ofstream out(tmp.path);
        out << text;
    }
    CHECK_THROWS_AS(load_series(tmp.path), DataError);
}

TEST_CASE("quote files parse, skip headers, and validate ranges") {
    TempFile tmp("quotes.csv");
    {
        std::ofstream out(tmp.path);
        out << "date,strike,maturity_years,spot,rate,implied_vol\n";
        out << "# comment line\n";
        out << "2020-03-02,95.0,0.25,100.0,0.02,0.21\n";
        out << "2020-03-02 105.0 0.5 100.0 0.02 0.24\n"; // whitespace-delimited accepted
    }
    const auto quotes = load_quotes(tmp.path);
    REQUIRE(quotes.size() == 2);
    CHECK(quotes[0].strike == 95.0);
    CHECK(quotes[1].maturity == 0.5);

    {
        std::ofstream out(tmp.path);
        out << "2020-03-02,95.0,0.25,100.0,0.02,7.5\n"; // vol above 5.0
    }
    CHECK_THROWS_WITH_AS(load_quotes(tmp.path), doctest::Contains(":1:"), DataError);
}

TEST_CASE("market matrices agree with the axes") {
    SyntheticConfig cfg;
    cfg.days = 1;
    const auto series = synthetic_series(cfg, 11);
    const auto m = market_matrices(series.days[0], series.axes);
    for (int i = 0; i < kGridSize; ++i)
        for (int j = 0; j < kGridSize; ++j) {
            CHECK(std::fabs(m.strike.at({i, j}) / m.spot.at({i, j}) - series.axes.moneyness[size_t(i)]) < 1e-9);
            CHECK(m.tau.at({i, j}) == series.axes.maturity[size_t(j)]);
            CHECK(m.tau.at({i, j}) > 0.0);
            CHECK(m.tau.at({i, j}) <= 1.0);
            CHECK(m.rate.at({i, j}) == series.days[0].rate);
        }
}
