#pragma once

#include "volcast/piconvtf.hpp"
#include "volcast/surface_data.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace volcast::train {

using ad::Tensor;

enum class ModelKind { pinn, convlstm, sa_convlstm, convtf, piconvtf };

std::string kind_name(ModelKind k);
ModelKind parse_kind(const std::string& name); // ConfigError on unknown names

/// One experiment: model choice, training lengths, data source, and splits.
/// Defaults depend on the model, see default_config().
struct ExperimentConfig {
    ModelKind kind = ModelKind::convtf;
    int epochs = 100;
    int batch_size = 16;
    double lr = 0.001;
    int window = 10;
    uint64_t seed = 1;

    int hidden = 32; // conv hidden channels, or hidden-layer width for the pinn
    int kernel = 3;
    int heads = 4;
    int layers = 1;
    int attention_channels = 8;
    double lambda = 0.1;
    pi::DerivativeMode derivative_mode = pi::DerivativeMode::pointwise_analytic;
    bool augmented = false; // five-channel inputs [tau; sigma; S'; r; K']

    std::string data_file; // empty -> a synthetic series is generated
    int synthetic_days = 250;

    bool has_ranges = false; // false -> first 80% of days train, rest test
    data::DateRange train_range, test_range;
};

/// Per-model defaults: pinn 2000 epochs / batch 256 / lr 0.1 / hidden 10000;
/// recurrent models 100 / 32 / 0.001 / hidden 64; transformers 100 / 16 /
/// 0.001 / 32 channels / 4 heads. Window 10 everywhere.
ExperimentConfig default_config(ModelKind kind);

/// Flat key=value config text. Unknown keys are rejected; `entries` keeps the
/// explicitly-set fields so run-all can re-apply them on top of each model's
/// own defaults.
struct ParsedConfig {
    ExperimentConfig config;
    std::map<std::string, std::string> entries;
};
ParsedConfig parse_config(const std::string& text);
ParsedConfig load_config(const std::string& path);
void validate_config(const ExperimentConfig& cfg);

// --- metrics ----------------------------------------------------------------

struct MapeResult {
    double pct = 0.0;
    int excluded = 0; // cells with exactly zero truth, left out of the mean
};

/// 100 * mean(|pred - truth| / |truth|) over all cells.
MapeResult mape(const Tensor& pred, const Tensor& truth);

/// Nearest-rank percentile: sorted ascending, value at index ceil(q*n) - 1.
double percentile_nearest_rank(std::vector<double> values, double q);

struct FilteredCallMape {
    double pct = 0.0;
    int retained = 0; // cells above the day's 20th-percentile true price
};

/// Prices both vol grids on the day's market state and reports MAPE over the
/// cells whose true price exceeds the day's 20th percentile.
FilteredCallMape call_price_filtered_mape(const Tensor& sigma_pred, const Tensor& sigma_true,
                                          const data::MarketMatrices& market);

struct DailyMetrics {
    data::Date date;
    double vol_mape_pct = 0.0;
    double call_mape_pct = 0.0;
};

// --- checkpoints ------------------------------------------------------------

struct Checkpoint {
    std::string model;
    std::vector<std::pair<std::string, Tensor>> params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// --- regime splits ----------------------------------------------------------

struct NamedSplit {
    std::string name;
    data::DatasetSplit split;
};

struct RegimeSplitSet {
    std::vector<NamedSplit> splits; // main, subprime, covid
    double vol95_threshold = 0.0;   // 95th percentile of daily mean vol
};

/// The study's three date splits plus the high-vol-day diagnostic threshold.
/// Throws DataError when the series does not cover a range.
RegimeSplitSet regime_splits(const data::GridSeries& series);

// --- training ---------------------------------------------------------------

struct EpochLog {
    int epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    Checkpoint best;   // parameters of the lowest-validation epoch
    int best_epoch = 0; // 1-based; 0 when nothing completed
    std::vector<EpochLog> log;
    bool diverged = false; // loss went non-finite; best holds the last good state
};

/// Runs the configured epochs of mini-batch training and returns the
/// best-validation parameters plus the per-epoch log. The learning rate is
/// halved after five non-improving validation epochs (floor 1e-6). The pinn
/// trains in two half-length cycles, restarting the schedule from the saved
/// weights in between.
TrainResult train_model(const ExperimentConfig& cfg, const data::GridSeries& series);

/// Daily metrics of a trained checkpoint over the test split.
std::vector<DailyMetrics> evaluate_model(const ExperimentConfig& cfg, const Checkpoint& ckpt,
                                         const data::GridSeries& series);

/// Daily metrics of the predict-yesterday baseline over the same test days.
std::vector<DailyMetrics> persistence_metrics(const ExperimentConfig& cfg,
                                              const data::GridSeries& series);

/// One-step forecast: restores the checkpoint into the configured window model
/// and maps a window of 20x20 (or 1x20x20) vol grids to the next day's grid.
/// The surface model and augmented-input configs need per-day market state and
/// are rejected with DataError; mismatched shapes raise ShapeError.
Tensor predict_with(const ExperimentConfig& cfg, const Checkpoint& ckpt,
                    const std::vector<Tensor>& window);

// --- experiment plumbing ----------------------------------------------------

/// Loads or synthesizes the configured series.
data::GridSeries load_series_for(const ExperimentConfig& cfg);

/// Resolves the dataset split for a config over a series.
data::DatasetSplit resolve_split(const ExperimentConfig& cfg, const data::GridSeries& series);

struct ExperimentResult {
    std::string name; // model name as reported in files
    TrainResult training;
    std::vector<DailyMetrics> daily;
};

/// Trains and evaluates one model, writing <name>.ckpt, <name>_train_log.csv
/// and <name>_daily.csv plus a persistence baseline, summary.csv, and a
/// daily-MAPE plot into out_dir. Returns the per-model results.
std::vector<ExperimentResult> run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

/// Trains all five models (each from its own defaults overlaid with the
/// explicitly-set keys) plus the baseline on one shared data source.
std::vector<ExperimentResult> run_all(const ParsedConfig& parsed, const std::string& out_dir);

/// Writes one CSV row per day: date,vol_mape_pct,call_mape_pct.
void write_daily_csv(const std::string& path, const std::vector<DailyMetrics>& metrics);
std::vector<DailyMetrics> read_daily_csv(const std::string& path);
void write_train_log_csv(const std::string& path, const std::vector<EpochLog>& log);

struct PlotSeries {
    std::string label;
    std::vector<std::pair<data::Date, double>> points;
};

/// Simple SVG line chart of daily metric series.
void write_line_plot(const std::string& path, const std::string& title,
                     const std::vector<PlotSeries>& series);

} // namespace volcast::train
