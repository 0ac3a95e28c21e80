#pragma once

#include "volcast/dates.hpp"
#include "volcast/errors.hpp"
#include "volcast/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace volcast::data {

inline constexpr int kGridSize = 20;
inline constexpr int kGridCells = kGridSize * kGridSize;
inline constexpr double kVolFloor = 0.01;
inline constexpr double kVolCeil = 2.0;

/// Fixed evaluation knots: 20 moneyness values on [0.9, 1.1] and 20
/// maturities on [0.05, 1.0] (the maturity axis stays off zero so pricing
/// never degenerates).
struct GridAxes {
    std::array<double, kGridSize> moneyness{};
    std::array<double, kGridSize> maturity{};

    bool operator==(const GridAxes&) const = default;
};

GridAxes default_axes();

/// One raw option observation.
struct OptionQuote {
    Date date;
    double strike = 0.0;
    double maturity = 0.0; // years
    double spot = 0.0;
    double rate = 0.0;
    double implied_vol = 0.0;
};

/// One day's implied-volatility surface on the fixed knots.
/// values is row-major with rows = moneyness index, columns = maturity index.
struct VolSurfaceGrid {
    Date date;
    std::array<double, kGridCells> values{};
    double spot = 0.0;
    double rate = 0.0;

    double& at(int mi, int ti) { return values[static_cast<size_t>(mi * kGridSize + ti)]; }
    double at(int mi, int ti) const { return values[static_cast<size_t>(mi * kGridSize + ti)]; }
};

struct GridSeries {
    GridAxes axes;
    std::vector<VolSurfaceGrid> days;
};

/// The target day's per-cell market state, shaped like the surface.
struct MarketMatrices {
    ad::Tensor tau;    // (20,20)
    ad::Tensor spot;   // (20,20)
    ad::Tensor rate;   // (20,20)
    ad::Tensor strike; // (20,20)
};

MarketMatrices market_matrices(const VolSurfaceGrid& day, const GridAxes& axes);

/// The surface as a 1-channel feature map (1,20,20).
ad::Tensor grid_tensor(const VolSurfaceGrid& g);

/// One supervised example: `window` consecutive surfaces in, next surface out.
struct WindowedSample {
    std::vector<ad::Tensor> inputs; // window maps of (1,20,20)
    ad::Tensor target;              // (1,20,20)
    ad::Tensor target_grid;         // (20,20), same values
    MarketMatrices market;
    Date date; // target date
};

/// Inclusive date range.
struct DateRange {
    Date start;
    Date end;
    bool contains(const Date& d) const { return start <= d && d <= end; }
};

struct DatasetSplit {
    DateRange train;
    DateRange validation;
    DateRange test;
};

/// Carves validation as the latest 20% of the series dates inside the
/// training range (by trading-day count, at least one day when possible).
DatasetSplit make_split(const GridSeries& series, const DateRange& train_range, const DateRange& test_range);

struct Dataset {
    std::vector<WindowedSample> train;
    std::vector<WindowedSample> validation;
    std::vector<WindowedSample> test;
    std::vector<std::string> warnings;
};

/// Sliding windows of window+1 consecutive series days that lie entirely
/// inside one split range. Splits too short for a single window contribute
/// no samples and a warning record.
Dataset build_dataset(const GridSeries& series, const DatasetSplit& split, int window);

// --- interpolation ----------------------------------------------------------

/// Triangulation-based piecewise-cubic scattered interpolation of one day's
/// quotes onto the knots; knots outside the quote hull take the nearest
/// quote's value; the result is clamped to [0.01, 2.0].
VolSurfaceGrid interpolate_surface(const std::vector<OptionQuote>& quotes, const GridAxes& axes);

/// Groups quotes by date, interpolates each day, and assembles a series
/// sorted by date.
GridSeries ingest_quotes(const std::vector<OptionQuote>& quotes);

// --- synthetic generator ----------------------------------------------------

/// Parametric smile sigma(m, tau) = level_t + curvature (m-1)^2 + slope tau,
/// with level_t mean-reverting around base_level, a deterministic seasonal
/// drift, and optional exponentially decaying shocks. Spot follows a
/// lognormal daily recursion driven by level_t.
struct SyntheticConfig {
    int days = 250;
    Date start{2004, 1, 5};
    double base_level = 0.2;
    double curvature = 0.5;
    double term_slope = 0.05;
    double mean_reversion = 0.05;
    double level_noise = 0.004;
    double season_amplitude = 0.02;
    double season_period = 40.0; // trading days
    double spot0 = 100.0;
    double rate = 0.02;

    struct Shock {
        int day = 0;          // series index where the shock hits
        double magnitude = 0.0;
        double half_life = 10.0; // decay, trading days
    };
    std::vector<Shock> shocks;
};

GridSeries synthetic_series(const SyntheticConfig& config, uint64_t seed);

// --- persistence ------------------------------------------------------------

void save_series(const std::filesystem::path& path, const GridSeries& series);
GridSeries load_series(const std::filesystem::path& path);

/// Delimited text, one quote per row:
/// date, strike, maturity_years, spot, rate, implied_vol.
std::vector<OptionQuote> load_quotes(const std::filesystem::path& path);

} // namespace volcast::data
