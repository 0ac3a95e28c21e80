#include "volcast/train_eval.hpp"

#include "volcast/errors.hpp"
#include "volcast/optimizer.hpp"
#include "volcast/pinn.hpp"
#include "volcast/recurrent.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

namespace volcast::train {

using ad::Tape;
using ad::Var;

// --- model names ------------------------------------------------------------

std::string kind_name(ModelKind k) {
    switch (k) {
    case ModelKind::pinn: return "pinn";
    case ModelKind::convlstm: return "convlstm";
    case ModelKind::sa_convlstm: return "sa-convlstm";
    case ModelKind::convtf: return "convtf";
    case ModelKind::piconvtf: return "pi-convtf";
    }
    throw ConfigError("unreachable model kind");
}

ModelKind parse_kind(const std::string& name) {
    if (name == "pinn") return ModelKind::pinn;
    if (name == "convlstm") return ModelKind::convlstm;
    if (name == "sa-convlstm" || name == "sa_convlstm") return ModelKind::sa_convlstm;
    if (name == "convtf") return ModelKind::convtf;
    if (name == "pi-convtf" || name == "piconvtf" || name == "pi_convtf") return ModelKind::piconvtf;
    throw ConfigError("unknown model '" + name +
                      "' (expected pinn, convlstm, sa-convlstm, convtf, or pi-convtf)");
}

ExperimentConfig default_config(ModelKind kind) {
    ExperimentConfig cfg;
    cfg.kind = kind;
    switch (kind) {
    case ModelKind::pinn:
        cfg.epochs = 2000;
        cfg.batch_size = 256;
        cfg.lr = 0.1;
        cfg.hidden = 10000;
        break;
    case ModelKind::convlstm:
    case ModelKind::sa_convlstm:
        cfg.epochs = 100;
        cfg.batch_size = 32;
        cfg.lr = 0.001;
        cfg.hidden = 64;
        cfg.kernel = 3;
        break;
    case ModelKind::convtf:
    case ModelKind::piconvtf:
        cfg.epochs = 100;
        cfg.batch_size = 16;
        cfg.lr = 0.001;
        cfg.hidden = 32;
        cfg.heads = 4;
        break;
    }
    return cfg;
}

// --- config parsing ---------------------------------------------------------

namespace {

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + v + "' is not an integer");
    }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + v + "' is not a nonnegative integer");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + v + "' is not a number");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw ConfigError("key '" + key + "': '" + v + "' is not a boolean");
}

data::Date to_date(const std::string& key, const std::string& v) {
    try {
        return data::parse_date(v);
    } catch (const std::exception& e) {
        throw ConfigError("key '" + key + "': " + e.what());
    }
}

void apply_entry(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "model") cfg.kind = parse_kind(value);
    else if (key == "epochs") cfg.epochs = to_int(key, value);
    else if (key == "batch_size") cfg.batch_size = to_int(key, value);
    else if (key == "lr") cfg.lr = to_double(key, value);
    else if (key == "window") cfg.window = to_int(key, value);
    else if (key == "seed") cfg.seed = to_u64(key, value);
    else if (key == "hidden") cfg.hidden = to_int(key, value);
    else if (key == "kernel") cfg.kernel = to_int(key, value);
    else if (key == "heads") cfg.heads = to_int(key, value);
    else if (key == "layers") cfg.layers = to_int(key, value);
    else if (key == "attention_channels") cfg.attention_channels = to_int(key, value);
    else if (key == "lambda") cfg.lambda = to_double(key, value);
    else if (key == "derivative_mode") {
        if (value == "pointwise" || value == "pointwise_analytic")
            cfg.derivative_mode = pi::DerivativeMode::pointwise_analytic;
        else if (value == "grid" || value == "grid_homogeneity")
            cfg.derivative_mode = pi::DerivativeMode::grid_homogeneity;
        else throw ConfigError("key 'derivative_mode': expected pointwise or grid, got '" + value + "'");
    } else if (key == "augmented") cfg.augmented = to_bool(key, value);
    else if (key == "data_file") cfg.data_file = value;
    else if (key == "synthetic_days") cfg.synthetic_days = to_int(key, value);
    else if (key == "train_start") cfg.train_range.start = to_date(key, value);
    else if (key == "train_end") cfg.train_range.end = to_date(key, value);
    else if (key == "test_start") cfg.test_range.start = to_date(key, value);
    else if (key == "test_end") cfg.test_range.end = to_date(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

const char* const kRangeKeys[4] = {"train_start", "train_end", "test_start", "test_end"};

} // namespace

ParsedConfig parse_config(const std::string& text) {
    std::map<std::string, std::string> entries;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                              line + "'");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        if (!entries.emplace(key, value).second)
            throw ConfigError("duplicate config key '" + key + "'");
    }

    ParsedConfig out;
    const auto model_it = entries.find("model");
    out.config = default_config(model_it == entries.end() ? ModelKind::convtf
                                                          : parse_kind(model_it->second));
    for (const auto& [k, v] : entries) apply_entry(out.config, k, v);

    int range_keys = 0;
    for (const char* k : kRangeKeys) range_keys += entries.count(k) ? 1 : 0;
    if (range_keys != 0 && range_keys != 4)
        throw ConfigError("date ranges need all four of train_start/train_end/test_start/test_end");
    out.config.has_ranges = range_keys == 4;

    out.entries = std::move(entries);
    validate_config(out.config);
    return out;
}

ParsedConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

void validate_config(const ExperimentConfig& cfg) {
    if (cfg.epochs < 1) throw ConfigError("epochs must be positive");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(cfg.lr > 0.0)) throw ConfigError("lr must be positive");
    if (cfg.window < 1) throw ConfigError("window must be positive");
    if (cfg.hidden < 1) throw ConfigError("hidden must be positive");
    if (cfg.kernel < 1 || cfg.kernel % 2 == 0) throw ConfigError("kernel must be odd and positive");
    if (cfg.heads < 1) throw ConfigError("heads must be positive");
    if (cfg.layers < 1) throw ConfigError("layers must be positive");
    if (cfg.attention_channels < 1) throw ConfigError("attention_channels must be positive");
    if (!(cfg.lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
    if (cfg.synthetic_days < 1) throw ConfigError("synthetic_days must be positive");
    if ((cfg.kind == ModelKind::convtf || cfg.kind == ModelKind::piconvtf) &&
        cfg.hidden % cfg.heads != 0)
        throw ConfigError("hidden must be divisible by heads for the transformer models");
    if (cfg.augmented && (cfg.kind == ModelKind::pinn || cfg.kind == ModelKind::piconvtf))
        throw ConfigError("augmented inputs apply to convlstm, sa-convlstm, and convtf only");
    if (cfg.has_ranges) {
        if (!(cfg.train_range.start <= cfg.train_range.end) ||
            !(cfg.test_range.start <= cfg.test_range.end))
            throw ConfigError("date ranges must run forward");
        if (!(cfg.train_range.end < cfg.test_range.start))
            throw ConfigError("training dates must precede test dates");
    }
}

// --- metrics ----------------------------------------------------------------

MapeResult mape(const Tensor& pred, const Tensor& truth) {
    if (!pred.same_shape(truth))
        throw ShapeError("mape shapes differ: " + ad::shape_str(pred.shape) + " vs " +
                         ad::shape_str(truth.shape));
    MapeResult out;
    double acc = 0.0;
    int64_t used = 0;
    for (size_t i = 0; i < truth.data.size(); ++i) {
        if (truth.data[i] == 0.0) {
            ++out.excluded;
            continue;
        }
        acc += std::fabs(pred.data[i] - truth.data[i]) / std::fabs(truth.data[i]);
        ++used;
    }
    out.pct = used > 0 ? 100.0 * acc / double(used) : 0.0;
    return out;
}

double percentile_nearest_rank(std::vector<double> values, double q) {
    if (values.empty()) throw DataError("percentile of an empty set");
    if (!(q > 0.0 && q <= 1.0)) throw ConfigError("percentile fraction must lie in (0, 1]");
    std::sort(values.begin(), values.end());
    const int rank = std::max(1, int(std::ceil(q * double(values.size()))));
    return values[size_t(std::min<int>(rank, int(values.size())) - 1)];
}

FilteredCallMape call_price_filtered_mape(const Tensor& sigma_pred, const Tensor& sigma_true,
                                          const data::MarketMatrices& market) {
    Tape t;
    const Tensor c_pred = t.val(pi::eval_call_grid(t, t.value(sigma_pred), market).call);
    const Tensor c_true = t.val(pi::eval_call_grid(t, t.value(sigma_true), market).call);

    const double threshold = percentile_nearest_rank({c_true.data.begin(), c_true.data.end()}, 0.2);
    FilteredCallMape out;
    double acc = 0.0;
    for (size_t i = 0; i < c_true.data.size(); ++i) {
        if (!(c_true.data[i] > threshold)) continue;
        acc += std::fabs(c_pred.data[i] - c_true.data[i]) / c_true.data[i];
        ++out.retained;
    }
    out.pct = out.retained > 0 ? 100.0 * acc / double(out.retained) : 0.0;
    return out;
}

// --- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out << "volcast-checkpoint v1\n";
    out << "model " << ckpt.model << "\n";
    out << "tensors " << ckpt.params.size() << "\n";
    char buf[32];
    for (const auto& [name, tensor] : ckpt.params) {
        out << "tensor " << name << " " << tensor.rank();
        for (int d : tensor.shape) out << " " << d;
        out << "\n";
        for (size_t i = 0; i < tensor.data.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", tensor.data[i]);
            out << (i ? " " : "") << buf;
        }
        out << "\n";
    }
    if (!out) throw DataError("failed while writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read checkpoint " + path);
    std::string header;
    std::getline(in, header);
    if (header != "volcast-checkpoint v1")
        throw DataError(path + ": unsupported checkpoint header '" + header + "'");

    Checkpoint ckpt;
    std::string word;
    size_t count = 0;
    if (!(in >> word) || word != "model" || !(in >> ckpt.model) || !(in >> word) ||
        word != "tensors" || !(in >> count))
        throw DataError(path + ": malformed checkpoint preamble");
    for (size_t k = 0; k < count; ++k) {
        std::string name;
        int rank = 0;
        if (!(in >> word) || word != "tensor" || !(in >> name) || !(in >> rank) || rank < 0)
            throw DataError(path + ": malformed tensor header for entry " + std::to_string(k));
        ad::Shape shape;
        shape.resize(size_t(rank));
        for (int& d : shape)
            if (!(in >> d) || d < 1) throw DataError(path + ": bad shape for tensor " + name);
        Tensor tensor = Tensor::zeros(shape);
        for (double& v : tensor.data)
            if (!(in >> v)) throw DataError(path + ": truncated values for tensor " + name);
        ckpt.params.emplace_back(std::move(name), std::move(tensor));
    }
    return ckpt;
}

namespace {

Checkpoint snapshot_params(const std::string& model, const std::vector<ad::ParamTensor*>& params) {
    Checkpoint ckpt;
    ckpt.model = model;
    ckpt.params.reserve(params.size());
    for (const ad::ParamTensor* p : params) ckpt.params.emplace_back(p->name, p->value);
    return ckpt;
}

void restore_params(const std::vector<ad::ParamTensor*>& params, const Checkpoint& ckpt) {
    if (ckpt.params.size() != params.size())
        throw DataError("checkpoint holds " + std::to_string(ckpt.params.size()) +
                        " tensors, model expects " + std::to_string(params.size()));
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, tensor] : ckpt.params) by_name[name] = &tensor;
    for (ad::ParamTensor* p : params) {
        const auto it = by_name.find(p->name);
        if (it == by_name.end()) throw DataError("checkpoint misses parameter '" + p->name + "'");
        if (!(it->second->shape == p->value.shape))
            throw DataError("checkpoint parameter '" + p->name + "' has shape " +
                            ad::shape_str(it->second->shape) + ", model expects " +
                            ad::shape_str(p->value.shape));
        p->value = *it->second;
        p->zero_grad();
    }
}

} // namespace

// --- regime splits ----------------------------------------------------------

RegimeSplitSet regime_splits(const data::GridSeries& series) {
    if (series.days.empty()) throw DataError("regime splits need a nonempty series");
    const data::Date first = series.days.front().date, last = series.days.back().date;

    struct Spec {
        const char* name;
        data::DateRange train, test;
    };
    const Spec specs[3] = {
        {"main", {{2004, 1, 5}, {2019, 12, 31}}, {{2020, 1, 1}, {2021, 8, 13}}},
        {"subprime", {{2004, 1, 5}, {2008, 9, 25}}, {{2008, 9, 26}, {2009, 5, 11}}},
        {"covid", {{2009, 5, 12}, {2020, 3, 4}}, {{2020, 3, 5}, {2020, 4, 21}}},
    };

    RegimeSplitSet out;
    for (const Spec& s : specs) {
        if (first > s.train.start || last < s.test.end)
            throw DataError("series (" + data::to_string(first) + " .. " + data::to_string(last) +
                            ") does not cover the " + s.name + " split (" +
                            data::to_string(s.train.start) + " .. " + data::to_string(s.test.end) + ")");
        out.splits.push_back({s.name, data::make_split(series, s.train, s.test)});
    }

    std::vector<double> daily_mean;
    daily_mean.reserve(series.days.size());
    for (const auto& day : series.days) {
        double acc = 0.0;
        for (double v : day.values) acc += v;
        daily_mean.push_back(acc / double(data::kGridCells));
    }
    out.vol95_threshold = percentile_nearest_rank(std::move(daily_mean), 0.95);
    return out;
}

// --- data plumbing ----------------------------------------------------------

data::GridSeries load_series_for(const ExperimentConfig& cfg) {
    if (!cfg.data_file.empty()) return data::load_series(cfg.data_file);
    data::SyntheticConfig sc;
    sc.days = cfg.synthetic_days;
    return data::synthetic_series(sc, cfg.seed);
}

data::DatasetSplit resolve_split(const ExperimentConfig& cfg, const data::GridSeries& series) {
    if (series.days.size() < 2) throw DataError("series too short to split");
    if (cfg.has_ranges) return data::make_split(series, cfg.train_range, cfg.test_range);
    const size_t n = series.days.size();
    const size_t n_train = std::max<size_t>(1, n * 4 / 5);
    const data::DateRange train{series.days.front().date, series.days[n_train - 1].date};
    const data::DateRange test{series.days[n_train].date, series.days.back().date};
    return data::make_split(series, train, test);
}

namespace {

/// Five stacked feature maps for one day: maturity, vol surface, scaled spot,
/// rate, scaled strike.
Tensor augmented_map(const data::VolSurfaceGrid& day, const data::GridAxes& axes, double spot_scale) {
    const data::MarketMatrices mm = data::market_matrices(day, axes);
    Tensor out = Tensor::zeros({5, data::kGridSize, data::kGridSize});
    const int cells = data::kGridCells;
    for (int i = 0; i < cells; ++i) {
        out.data[size_t(i)] = mm.tau.data[size_t(i)];
        out.data[size_t(cells + i)] = day.values[size_t(i)];
        out.data[size_t(2 * cells + i)] = mm.spot.data[size_t(i)] / spot_scale;
        out.data[size_t(3 * cells + i)] = mm.rate.data[size_t(i)];
        out.data[size_t(4 * cells + i)] = mm.strike.data[size_t(i)] / spot_scale;
    }
    return out;
}

std::map<data::Date, size_t> date_index(const data::GridSeries& series) {
    std::map<data::Date, size_t> idx;
    for (size_t i = 0; i < series.days.size(); ++i) idx[series.days[i].date] = i;
    return idx;
}

double first_train_spot(const data::GridSeries& series, const data::DatasetSplit& split) {
    for (const auto& day : series.days)
        if (split.train.contains(day.date)) return day.spot;
    throw DataError("training range holds no series days");
}

/// Input windows for a sample list, plain (the surface alone) or augmented.
std::vector<std::vector<Tensor>> sample_inputs(const std::vector<data::WindowedSample>& samples,
                                               const data::GridSeries& series, int window,
                                               bool augmented, double spot_scale) {
    std::vector<std::vector<Tensor>> out;
    out.reserve(samples.size());
    if (!augmented) {
        for (const auto& s : samples) out.push_back(s.inputs);
        return out;
    }
    const auto idx = date_index(series);
    for (const auto& s : samples) {
        const size_t target = idx.at(s.date);
        std::vector<Tensor> maps;
        maps.reserve(size_t(window));
        for (size_t i = target - size_t(window); i < target; ++i)
            maps.push_back(augmented_map(series.days[i], series.axes, spot_scale));
        out.push_back(std::move(maps));
    }
    return out;
}

/// Deterministic Fisher-Yates using raw generator draws, so shuffles match
/// across standard libraries.
void portable_shuffle(std::vector<size_t>& v, std::mt19937_64& rng) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

// --- conv-model dispatch ----------------------------------------------------

struct ConvModel {
    std::unique_ptr<rnn::RecurrentModel> recurrent;
    std::unique_ptr<tf::ConvTfModel> transformer;
    std::unique_ptr<pi::PiConvTfModel> informed;

    std::vector<ad::ParamTensor*> params() {
        if (recurrent) return recurrent->parameters();
        if (transformer) return transformer->parameters();
        return informed->parameters();
    }
    Var forward(Tape& t, const std::vector<Var>& window, nn::WeightVars& w) const {
        if (recurrent) return recurrent->forward(t, window, w);
        if (transformer) return transformer->forward(t, window, w);
        return informed->forward(t, window, w);
    }
    Tensor predict(const std::vector<Tensor>& window) {
        if (recurrent) return recurrent->predict(window);
        if (transformer) return transformer->predict(window);
        return informed->predict(window);
    }
};

ConvModel make_conv_model(const ExperimentConfig& cfg) {
    const int in_channels = cfg.augmented ? 5 : 1;
    ConvModel m;
    switch (cfg.kind) {
    case ModelKind::convlstm:
    case ModelKind::sa_convlstm: {
        rnn::RecurrentConfig rc;
        rc.variant = cfg.kind == ModelKind::convlstm ? rnn::Variant::plain
                                                     : rnn::Variant::self_attention;
        rc.input_channels = in_channels;
        rc.hidden_channels = cfg.hidden;
        rc.kernel_size = cfg.kernel;
        rc.layers = cfg.layers;
        rc.attention_channels = cfg.attention_channels;
        m.recurrent = std::make_unique<rnn::RecurrentModel>(rc, cfg.seed);
        break;
    }
    case ModelKind::convtf:
    case ModelKind::piconvtf: {
        tf::ConvTfConfig tc;
        tc.window = cfg.window;
        tc.channels = cfg.hidden;
        tc.heads = cfg.heads;
        tc.layers = cfg.layers;
        tc.input_channels = in_channels;
        // The full 30-layer prediction head belongs to the published width.
        // Downsized models get a rise-and-fall head in proportion.
        if (cfg.hidden != 32)
            tc.sffn_widths = {cfg.hidden, 2 * cfg.hidden, cfg.hidden, 1};
        if (cfg.kind == ModelKind::convtf) {
            m.transformer = std::make_unique<tf::ConvTfModel>(tc, cfg.seed);
        } else {
            pi::PhysicsLossConfig pc;
            pc.lambda = cfg.lambda;
            pc.mode = cfg.derivative_mode;
            m.informed = std::make_unique<pi::PiConvTfModel>(tc, pc, cfg.seed);
        }
        break;
    }
    case ModelKind::pinn:
        throw ConfigError("pinn is not a windowed convolutional model");
    }
    return m;
}

double validation_vol_mape(ConvModel& model, const std::vector<data::WindowedSample>& samples,
                           const std::vector<std::vector<Tensor>>& inputs) {
    double acc = 0.0;
    for (size_t i = 0; i < samples.size(); ++i)
        acc += mape(model.predict(inputs[i]), samples[i].target).pct;
    return acc / double(samples.size());
}

// --- pinn data --------------------------------------------------------------

struct PinnPoint {
    double spot, tau, moneyness, rate, sigma;
};

std::vector<PinnPoint> pinn_points(const data::GridSeries& series, const data::DateRange& range) {
    std::vector<PinnPoint> pts;
    for (const auto& day : series.days) {
        if (!range.contains(day.date)) continue;
        for (int mi = 0; mi < data::kGridSize; ++mi)
            for (int ti = 0; ti < data::kGridSize; ++ti)
                pts.push_back({day.spot, series.axes.maturity[size_t(ti)],
                               series.axes.moneyness[size_t(mi)], day.rate, day.at(mi, ti)});
    }
    return pts;
}

Tensor pinn_day_batch(const data::VolSurfaceGrid& day, const data::GridAxes& axes) {
    Tensor batch = Tensor::zeros({data::kGridCells, 4});
    int row = 0;
    for (int mi = 0; mi < data::kGridSize; ++mi)
        for (int ti = 0; ti < data::kGridSize; ++ti, ++row) {
            batch.at({row, 0}) = day.spot;
            batch.at({row, 1}) = axes.maturity[size_t(ti)];
            batch.at({row, 2}) = axes.moneyness[size_t(mi)];
            batch.at({row, 3}) = day.rate;
        }
    return batch;
}

Tensor pinn_predict_grid(pinn::PinnModel& model, const data::VolSurfaceGrid& day,
                         const data::GridAxes& axes) {
    Tape t;
    const Tensor sigma = t.val(model.forward(t, pinn_day_batch(day, axes)).sigma);
    Tensor grid = Tensor::zeros({1, data::kGridSize, data::kGridSize});
    for (int i = 0; i < data::kGridCells; ++i) grid.data[size_t(i)] = sigma.data[size_t(i)];
    return grid;
}

Tensor day_target(const data::VolSurfaceGrid& day) {
    Tensor t = Tensor::zeros({1, data::kGridSize, data::kGridSize});
    for (int i = 0; i < data::kGridCells; ++i) t.data[size_t(i)] = day.values[size_t(i)];
    return t;
}

TrainResult train_pinn(const ExperimentConfig& cfg, const data::GridSeries& series,
                       const data::DatasetSplit& split) {
    const auto points = pinn_points(series, split.train);
    if (points.empty()) throw DataError("training range holds no surface points");
    std::vector<const data::VolSurfaceGrid*> val_days;
    for (const auto& day : series.days)
        if (split.validation.contains(day.date)) val_days.push_back(&day);
    if (val_days.empty()) throw DataError("validation range holds no series days");

    pinn::PinnModel model({.hidden = cfg.hidden, .spot_scale = first_train_spot(series, split)},
                          cfg.seed);
    const auto params = model.parameters();
    opt::Adam adam(params, {.lr = cfg.lr});
    opt::PlateauSchedule sched(cfg.lr);

    TrainResult res;
    res.best = snapshot_params(kind_name(cfg.kind), params);
    double best_val = std::numeric_limits<double>::infinity();

    std::vector<size_t> order(points.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(cfg.seed + 1);

    const int cycle = cfg.epochs / 2; // transfer-learning restart point
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (cycle > 0 && epoch == cycle + 1) {
            restore_params(params, res.best); // second cycle resumes from the saved weights
            sched.reset(cfg.lr);
            adam.set_lr(cfg.lr);
        }

        portable_shuffle(order, shuffle_rng);
        double loss_sum = 0.0;
        bool broken = false;
        for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
            const size_t k = std::min(size_t(cfg.batch_size), order.size() - start);
            Tensor batch = Tensor::zeros({int(k), 4}), truth = Tensor::zeros({int(k), 1});
            for (size_t b = 0; b < k; ++b) {
                const PinnPoint& p = points[order[start + b]];
                batch.at({int(b), 0}) = p.spot;
                batch.at({int(b), 1}) = p.tau;
                batch.at({int(b), 2}) = p.moneyness;
                batch.at({int(b), 3}) = p.rate;
                truth.at({int(b), 0}) = p.sigma;
            }
            Tape t;
            const Var loss = model.loss(t, batch, truth).total;
            const double value = t.val(loss).item();
            if (!std::isfinite(value)) {
                broken = true;
                break;
            }
            loss_sum += value * double(k);
            t.backward(loss);
            adam.step();
        }
        if (broken) {
            res.log.push_back({epoch, std::numeric_limits<double>::quiet_NaN(),
                               std::numeric_limits<double>::quiet_NaN(), adam.lr()});
            res.diverged = true;
            break;
        }

        double val_acc = 0.0;
        for (const auto* day : val_days)
            val_acc += mape(pinn_predict_grid(model, *day, series.axes), day_target(*day)).pct;
        const double val_loss = val_acc / double(val_days.size());
        res.log.push_back({epoch, loss_sum / double(points.size()), val_loss, adam.lr()});
        if (!std::isfinite(val_loss)) {
            res.diverged = true;
            break;
        }
        if (val_loss < best_val) {
            best_val = val_loss;
            res.best = snapshot_params(kind_name(cfg.kind), params);
            res.best_epoch = epoch;
        }
        adam.set_lr(sched.observe(val_loss));
    }
    return res;
}

TrainResult train_conv(const ExperimentConfig& cfg, const data::GridSeries& series,
                       const data::DatasetSplit& split) {
    const data::Dataset dataset = data::build_dataset(series, split, cfg.window);
    if (dataset.train.empty()) throw DataError("training split yields no windowed samples");
    if (dataset.validation.empty()) throw DataError("validation split yields no windowed samples");

    const double spot_scale = cfg.augmented ? first_train_spot(series, split) : 1.0;
    const auto train_inputs =
        sample_inputs(dataset.train, series, cfg.window, cfg.augmented, spot_scale);
    const auto val_inputs =
        sample_inputs(dataset.validation, series, cfg.window, cfg.augmented, spot_scale);

    ConvModel model = make_conv_model(cfg);
    const auto params = model.params();
    opt::Adam adam(params, {.lr = cfg.lr});
    opt::PlateauSchedule sched(cfg.lr);

    TrainResult res;
    res.best = snapshot_params(kind_name(cfg.kind), params);
    double best_val = std::numeric_limits<double>::infinity();

    std::vector<size_t> order(dataset.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(cfg.seed + 1);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        portable_shuffle(order, shuffle_rng);
        double loss_sum = 0.0;
        bool broken = false;
        for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
            const size_t k = std::min(size_t(cfg.batch_size), order.size() - start);
            Tape t;
            const nn::WeightVars bound = nn::bind_all(t, params);
            Var sum;
            for (size_t b = 0; b < k; ++b) {
                const data::WindowedSample& s = dataset.train[order[start + b]];
                std::vector<Var> window;
                window.reserve(train_inputs[order[start + b]].size());
                for (const Tensor& map : train_inputs[order[start + b]]) window.push_back(t.value(map));
                nn::WeightVars cursor{bound.vars, 0};
                Var sample_loss;
                if (model.informed) {
                    sample_loss =
                        model.informed->loss(t, window, s.target, s.market, cursor).total;
                } else {
                    const Var pred = model.forward(t, window, cursor);
                    sample_loss = t.mean(t.abs(t.sub(pred, t.value(s.target))));
                }
                sum = sum.valid() ? t.add(sum, sample_loss) : sample_loss;
            }
            const Var batch_loss = t.scale(sum, 1.0 / double(k));
            const double value = t.val(batch_loss).item();
            if (!std::isfinite(value)) {
                broken = true;
                break;
            }
            loss_sum += value * double(k);
            t.backward(batch_loss);
            adam.step();
        }
        if (broken) {
            res.log.push_back({epoch, std::numeric_limits<double>::quiet_NaN(),
                               std::numeric_limits<double>::quiet_NaN(), adam.lr()});
            res.diverged = true;
            break;
        }

        const double val_loss = validation_vol_mape(model, dataset.validation, val_inputs);
        res.log.push_back({epoch, loss_sum / double(dataset.train.size()), val_loss, adam.lr()});
        if (!std::isfinite(val_loss)) {
            res.diverged = true;
            break;
        }
        if (val_loss < best_val) {
            best_val = val_loss;
            res.best = snapshot_params(kind_name(cfg.kind), params);
            res.best_epoch = epoch;
        }
        adam.set_lr(sched.observe(val_loss));
    }
    return res;
}

} // namespace

TrainResult train_model(const ExperimentConfig& cfg, const data::GridSeries& series) {
    validate_config(cfg);
    const data::DatasetSplit split = resolve_split(cfg, series);
    return cfg.kind == ModelKind::pinn ? train_pinn(cfg, series, split)
                                       : train_conv(cfg, series, split);
}

std::vector<DailyMetrics> evaluate_model(const ExperimentConfig& cfg, const Checkpoint& ckpt,
                                         const data::GridSeries& series) {
    validate_config(cfg);
    if (ckpt.model != kind_name(cfg.kind))
        throw DataError("checkpoint was trained for '" + ckpt.model + "', config asks for '" +
                        kind_name(cfg.kind) + "'");
    const data::DatasetSplit split = resolve_split(cfg, series);
    const data::Dataset dataset = data::build_dataset(series, split, cfg.window);
    if (dataset.test.empty()) throw DataError("test split yields no windowed samples");

    std::vector<DailyMetrics> out;
    out.reserve(dataset.test.size());
    if (cfg.kind == ModelKind::pinn) {
        pinn::PinnModel model({.hidden = cfg.hidden, .spot_scale = first_train_spot(series, split)},
                              cfg.seed);
        restore_params(model.parameters(), ckpt);
        const auto idx = date_index(series);
        for (const auto& s : dataset.test) {
            const data::VolSurfaceGrid& day = series.days[idx.at(s.date)];
            const Tensor pred = pinn_predict_grid(model, day, series.axes);
            out.push_back({s.date, mape(pred, s.target).pct,
                           call_price_filtered_mape(pred, s.target_grid, s.market).pct});
        }
        return out;
    }

    const double spot_scale = cfg.augmented ? first_train_spot(series, split) : 1.0;
    const auto test_inputs = sample_inputs(dataset.test, series, cfg.window, cfg.augmented, spot_scale);
    ConvModel model = make_conv_model(cfg);
    restore_params(model.params(), ckpt);
    for (size_t i = 0; i < dataset.test.size(); ++i) {
        const data::WindowedSample& s = dataset.test[i];
        const Tensor pred = model.predict(test_inputs[i]);
        out.push_back({s.date, mape(pred, s.target).pct,
                       call_price_filtered_mape(pred, s.target_grid, s.market).pct});
    }
    return out;
}

Tensor predict_with(const ExperimentConfig& cfg, const Checkpoint& ckpt,
                    const std::vector<Tensor>& window) {
    if (cfg.kind == ModelKind::pinn)
        throw DataError("the surface model predicts from a day's market state, not a grid window; "
                        "use evaluate instead");
    if (cfg.augmented)
        throw DataError("augmented-input forecasts need per-day market state; use evaluate instead");
    if (kind_name(cfg.kind) != ckpt.model)
        throw DataError("checkpoint holds a " + ckpt.model + " model, config asks for " +
                        kind_name(cfg.kind));
    if (int(window.size()) != cfg.window)
        throw ShapeError("expected a window of " + std::to_string(cfg.window) + " grids, got " +
                         std::to_string(window.size()));
    std::vector<Tensor> inputs;
    inputs.reserve(window.size());
    for (const Tensor& g : window) {
        if (g.shape == ad::Shape{data::kGridSize, data::kGridSize}) {
            Tensor lifted = Tensor::zeros({1, data::kGridSize, data::kGridSize});
            lifted.data = g.data;
            inputs.push_back(std::move(lifted));
        } else if (g.shape == ad::Shape{1, data::kGridSize, data::kGridSize}) {
            inputs.push_back(g);
        } else {
            throw ShapeError("window grids must be 20x20 or 1x20x20, got " + ad::shape_str(g.shape));
        }
    }
    ConvModel model = make_conv_model(cfg);
    restore_params(model.params(), ckpt);
    return model.predict(inputs);
}

std::vector<DailyMetrics> persistence_metrics(const ExperimentConfig& cfg,
                                              const data::GridSeries& series) {
    const data::DatasetSplit split = resolve_split(cfg, series);
    const data::Dataset dataset = data::build_dataset(series, split, cfg.window);
    if (dataset.test.empty()) throw DataError("test split yields no windowed samples");
    std::vector<DailyMetrics> out;
    out.reserve(dataset.test.size());
    for (const auto& s : dataset.test) {
        const Tensor& pred = s.inputs.back(); // yesterday's surface
        out.push_back({s.date, mape(pred, s.target).pct,
                       call_price_filtered_mape(pred, s.target_grid, s.market).pct});
    }
    return out;
}

// --- files ------------------------------------------------------------------

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void require_stream(const std::ofstream& out, const std::string& path) {
    if (!out) throw DataError("cannot write " + path);
}

double average_of(const std::vector<DailyMetrics>& metrics, double DailyMetrics::* field) {
    if (metrics.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& m : metrics) acc += m.*field;
    return acc / double(metrics.size());
}

} // namespace

void write_daily_csv(const std::string& path, const std::vector<DailyMetrics>& metrics) {
    std::ofstream out(path);
    require_stream(out, path);
    out << "date,vol_mape_pct,call_mape_pct\n";
    for (const auto& m : metrics)
        out << data::to_string(m.date) << "," << fmt(m.vol_mape_pct) << "," << fmt(m.call_mape_pct)
            << "\n";
    require_stream(out, path);
}

std::vector<DailyMetrics> read_daily_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read " + path);
    std::string line;
    if (!std::getline(in, line) || line != "date,vol_mape_pct,call_mape_pct")
        throw DataError(path + ": expected the daily-metrics header, got '" + line + "'");
    std::vector<DailyMetrics> out;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string date_s, vol_s, call_s;
        if (!std::getline(row, date_s, ',') || !std::getline(row, vol_s, ',') ||
            !std::getline(row, call_s))
            throw DataError(path + ":" + std::to_string(line_no) + ": malformed row '" + line + "'");
        out.push_back({data::parse_date(date_s), to_double("vol_mape_pct", vol_s),
                       to_double("call_mape_pct", call_s)});
    }
    return out;
}

void write_train_log_csv(const std::string& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path);
    require_stream(out, path);
    out << "epoch,train_loss,val_loss,lr\n";
    for (const auto& row : log)
        out << row.epoch << "," << fmt(row.train_loss) << "," << fmt(row.val_loss) << ","
            << fmt(row.lr) << "\n";
    require_stream(out, path);
}

void write_line_plot(const std::string& path, const std::string& title,
                     const std::vector<PlotSeries>& series) {
    const double width = 980, height = 460;
    const double left = 70, right = width - 180, top = 45, bottom = height - 55;

    double y_max = 0.0;
    size_t n_max = 0;
    for (const auto& s : series) {
        n_max = std::max(n_max, s.points.size());
        for (const auto& [d, v] : s.points) y_max = std::max(y_max, v);
    }
    if (y_max <= 0.0) y_max = 1.0;
    y_max *= 1.08;

    const char* const palette[] = {"#1f6fb2", "#c23b3b", "#2e8b57", "#8a5bb8", "#d2832a", "#5b5b5b"};
    const size_t n_colors = sizeof palette / sizeof palette[0];

    std::ofstream out(path);
    require_stream(out, path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    out << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    out << "<text x=\"" << (left + right) / 2 << "\" y=\"24\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";

    // frame and horizontal guides
    out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << right - left << "\" height=\""
        << bottom - top << "\" fill=\"none\" stroke=\"#333\"/>\n";
    for (int g = 0; g <= 5; ++g) {
        const double frac = g / 5.0;
        const double y = bottom - frac * (bottom - top);
        if (g > 0)
            out << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << right << "\" y2=\"" << y
                << "\" stroke=\"#ddd\"/>\n";
        out << "<text x=\"" << left - 8 << "\" y=\"" << y + 4
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
            << fmt(frac * y_max) << "</text>\n";
    }

    const auto x_of = [&](size_t i, size_t n) {
        return n < 2 ? (left + right) / 2 : left + (right - left) * double(i) / double(n - 1);
    };
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& pts = series[si].points;
        if (pts.empty()) continue;
        out << "<polyline fill=\"none\" stroke=\"" << palette[si % n_colors]
            << "\" stroke-width=\"1.6\" points=\"";
        for (size_t i = 0; i < pts.size(); ++i) {
            const double y = bottom - (pts[i].second / y_max) * (bottom - top);
            out << x_of(i, pts.size()) << "," << y << " ";
        }
        out << "\"/>\n";
        const double ly = top + 18 + 18 * double(si);
        out << "<line x1=\"" << right + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << right + 36
            << "\" y2=\"" << ly - 4 << "\" stroke=\"" << palette[si % n_colors]
            << "\" stroke-width=\"2\"/>\n";
        out << "<text x=\"" << right + 42 << "\" y=\"" << ly
            << "\" font-family=\"sans-serif\" font-size=\"12\">" << series[si].label << "</text>\n";
    }

    // a few date labels from the longest series
    for (const auto& s : series) {
        if (s.points.size() != n_max || n_max == 0) continue;
        const size_t ticks = std::min<size_t>(6, n_max);
        for (size_t k = 0; k < ticks; ++k) {
            const size_t i = ticks < 2 ? 0 : k * (n_max - 1) / (ticks - 1);
            out << "<text x=\"" << x_of(i, n_max) << "\" y=\"" << bottom + 18
                << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
                << data::to_string(s.points[i].first) << "</text>\n";
        }
        break;
    }
    out << "</svg>\n";
    require_stream(out, path);
}

// --- experiments ------------------------------------------------------------

namespace {

void write_summary_csv(const std::string& path,
                       const std::vector<std::pair<std::string, const std::vector<DailyMetrics>*>>& rows) {
    std::ofstream out(path);
    require_stream(out, path);
    out << "model,avg_vol_mape_pct,avg_call_mape_pct\n";
    for (const auto& [name, metrics] : rows)
        out << name << "," << fmt(average_of(*metrics, &DailyMetrics::vol_mape_pct)) << ","
            << fmt(average_of(*metrics, &DailyMetrics::call_mape_pct)) << "\n";
    require_stream(out, path);
}

ExperimentResult run_one(const ExperimentConfig& cfg, const data::GridSeries& series,
                         const std::string& out_dir) {
    ExperimentResult res;
    res.name = kind_name(cfg.kind);
    res.training = train_model(cfg, series);
    save_checkpoint(out_dir + "/" + res.name + ".ckpt", res.training.best);
    write_train_log_csv(out_dir + "/" + res.name + "_train_log.csv", res.training.log);
    res.daily = evaluate_model(cfg, res.training.best, series);
    write_daily_csv(out_dir + "/" + res.name + "_daily.csv", res.daily);
    return res;
}

void finish_outputs(const std::vector<ExperimentResult>& results, const std::string& out_dir) {
    std::vector<std::pair<std::string, const std::vector<DailyMetrics>*>> rows;
    std::vector<PlotSeries> plot;
    for (const auto& r : results) {
        rows.emplace_back(r.name, &r.daily);
        PlotSeries s{r.name, {}};
        for (const auto& m : r.daily) s.points.emplace_back(m.date, m.vol_mape_pct);
        plot.push_back(std::move(s));
    }
    write_summary_csv(out_dir + "/summary.csv", rows);
    write_line_plot(out_dir + "/daily_mape.svg", "Daily volatility MAPE on the test split", plot);
}

void ensure_dir(const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create output directory " + out_dir + ": " + ec.message());
}

} // namespace

std::vector<ExperimentResult> run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
    validate_config(cfg);
    ensure_dir(out_dir);
    const data::GridSeries series = load_series_for(cfg);

    std::vector<ExperimentResult> results;
    results.push_back(run_one(cfg, series, out_dir));

    ExperimentResult base;
    base.name = "persistence";
    base.daily = persistence_metrics(cfg, series);
    write_daily_csv(out_dir + "/persistence_daily.csv", base.daily);
    results.push_back(std::move(base));

    finish_outputs(results, out_dir);
    return results;
}

std::vector<ExperimentResult> run_all(const ParsedConfig& parsed, const std::string& out_dir) {
    ensure_dir(out_dir);
    const data::GridSeries series = load_series_for(parsed.config);

    std::vector<ExperimentResult> results;
    const ModelKind kinds[] = {ModelKind::pinn, ModelKind::convlstm, ModelKind::sa_convlstm,
                               ModelKind::convtf, ModelKind::piconvtf};
    for (const ModelKind kind : kinds) {
        ExperimentConfig cfg = default_config(kind);
        for (const auto& [k, v] : parsed.entries) {
            if (k == "model" || (k == "augmented" &&
                                 (kind == ModelKind::pinn || kind == ModelKind::piconvtf)))
                continue;
            apply_entry(cfg, k, v);
        }
        cfg.has_ranges = parsed.config.has_ranges;
        validate_config(cfg);
        results.push_back(run_one(cfg, series, out_dir));
    }

    ExperimentResult base;
    base.name = "persistence";
    base.daily = persistence_metrics(parsed.config, series);
    write_daily_csv(out_dir + "/persistence_daily.csv", base.daily);
    results.push_back(std::move(base));

    finish_outputs(results, out_dir);
    return results;
}

} // namespace volcast::train
