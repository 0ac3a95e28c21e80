#include "CLI11.hpp"

#include "volcast/errors.hpp"
#include "volcast/surface_data.hpp"
#include "volcast/train_eval.hpp"

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace volcast;

/// --out-dir wins; otherwise VOLCAST_OUT_DIR; otherwise ./volcast-out.
std::string resolve_out_dir(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("VOLCAST_OUT_DIR"); env && *env) return env;
    return "volcast-out";
}

data::SyntheticConfig::Shock parse_shock(const std::string& text) {
    std::istringstream in(text);
    data::SyntheticConfig::Shock shock;
    char c1 = 0, c2 = 0;
    if (!(in >> shock.day >> c1 >> shock.magnitude >> c2 >> shock.half_life) || c1 != ':' ||
        c2 != ':' || !in.eof())
        throw ConfigError("shock '" + text + "' is not day:magnitude:half_life");
    return shock;
}

int generate_data(const std::string& out, int days, uint64_t seed, double base_level,
                  double curvature, double term_slope, double spot0, double rate,
                  const std::vector<std::string>& shocks) {
    data::SyntheticConfig cfg;
    cfg.days = days;
    cfg.base_level = base_level;
    cfg.curvature = curvature;
    cfg.term_slope = term_slope;
    cfg.spot0 = spot0;
    cfg.rate = rate;
    for (const auto& s : shocks) cfg.shocks.push_back(parse_shock(s));
    const data::GridSeries series = data::synthetic_series(cfg, seed);
    data::save_series(out, series);
    std::cout << "wrote " << series.days.size() << " days to " << out << "\n";
    return 0;
}

int ingest(const std::string& quotes_path, const std::string& out) {
    const auto quotes = data::load_quotes(quotes_path);
    const data::GridSeries series = data::ingest_quotes(quotes);
    data::save_series(out, series);
    std::cout << "interpolated " << quotes.size() << " quotes into " << series.days.size()
              << " surface days at " << out << "\n";
    return 0;
}

void print_summary(const std::vector<train::ExperimentResult>& results) {
    for (const auto& r : results) {
        double vol = 0.0, call = 0.0;
        for (const auto& m : r.daily) {
            vol += m.vol_mape_pct;
            call += m.call_mape_pct;
        }
        const double n = r.daily.empty() ? 1.0 : double(r.daily.size());
        std::cout << r.name << ": vol MAPE " << vol / n << "%, call MAPE " << call / n << "% over "
                  << r.daily.size() << " test days";
        if (r.training.diverged) std::cout << " [training diverged; best kept weights written]";
        std::cout << "\n";
    }
}

bool any_diverged(const std::vector<train::ExperimentResult>& results) {
    for (const auto& r : results)
        if (r.training.diverged) return true;
    return false;
}

int train_cmd(const std::string& config_path, const std::string& out_dir_flag) {
    const auto parsed = train::load_config(config_path);
    const std::string out_dir = resolve_out_dir(out_dir_flag);
    const auto results = train::run_experiment(parsed.config, out_dir);
    print_summary(results);
    std::cout << "artifacts in " << out_dir << "\n";
    return any_diverged(results) ? 4 : 0;
}

int evaluate_cmd(const std::string& config_path, const std::string& checkpoint_path,
                 const std::string& out_dir_flag) {
    const auto parsed = train::load_config(config_path);
    const std::string out_dir = resolve_out_dir(out_dir_flag);
    const auto ckpt = train::load_checkpoint(checkpoint_path);
    const data::GridSeries series = train::load_series_for(parsed.config);

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create output directory " + out_dir + ": " + ec.message());

    const auto daily = train::evaluate_model(parsed.config, ckpt, series);
    const auto base = train::persistence_metrics(parsed.config, series);
    const std::string name = train::kind_name(parsed.config.kind);
    train::write_daily_csv(out_dir + "/" + name + "_daily.csv", daily);
    train::write_daily_csv(out_dir + "/persistence_daily.csv", base);

    std::vector<train::ExperimentResult> results(2);
    results[0].name = name;
    results[0].daily = daily;
    results[1].name = "persistence";
    results[1].daily = base;
    print_summary(results);
    std::cout << "artifacts in " << out_dir << "\n";
    return 0;
}

int plot_cmd(const std::vector<std::string>& daily_csvs, const std::string& out,
             const std::string& title) {
    std::vector<train::PlotSeries> series;
    for (const auto& path : daily_csvs) {
        train::PlotSeries s;
        const auto stem = std::filesystem::path(path).stem().string();
        const auto cut = stem.rfind("_daily");
        s.label = cut == std::string::npos ? stem : stem.substr(0, cut);
        for (const auto& m : train::read_daily_csv(path)) s.points.emplace_back(m.date, m.vol_mape_pct);
        series.push_back(std::move(s));
    }
    train::write_line_plot(out, title, series);
    std::cout << "wrote " << out << "\n";
    return 0;
}

int run_all_cmd(const std::string& config_path, const std::string& out_dir_flag) {
    const auto parsed = train::load_config(config_path);
    const std::string out_dir = resolve_out_dir(out_dir_flag);
    const auto results = train::run_all(parsed, out_dir);
    print_summary(results);
    std::cout << "artifacts in " << out_dir << "\n";
    return any_diverged(results) ? 4 : 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Volatility-surface forecasting toolkit"};
    app.require_subcommand(1);

    // generate-data
    auto* gen = app.add_subcommand("generate-data", "Write a synthetic surface series file");
    std::string gen_out = "series.dat";
    int gen_days = 250;
    uint64_t gen_seed = 1;
    double gen_base = 0.2, gen_curv = 0.5, gen_slope = 0.05, gen_spot = 100.0, gen_rate = 0.02;
    std::vector<std::string> gen_shocks;
    gen->add_option("--out", gen_out, "Output series file");
    gen->add_option("--days", gen_days, "Trading days to generate");
    gen->add_option("--seed", gen_seed, "Random seed");
    gen->add_option("--base-level", gen_base, "Long-run volatility level");
    gen->add_option("--curvature", gen_curv, "Smile curvature in moneyness");
    gen->add_option("--term-slope", gen_slope, "Volatility slope in maturity");
    gen->add_option("--spot0", gen_spot, "Initial spot");
    gen->add_option("--rate", gen_rate, "Risk-free rate");
    gen->add_option("--shock", gen_shocks, "Volatility shock day:magnitude:half_life (repeatable)");

    // ingest
    auto* ing = app.add_subcommand("ingest", "Interpolate raw option quotes onto the surface grid");
    std::string ing_quotes, ing_out = "series.dat";
    ing->add_option("--quotes", ing_quotes, "Quote file: date,strike,maturity,spot,rate,vol rows")
        ->required();
    ing->add_option("--out", ing_out, "Output series file");

    // train
    auto* tr = app.add_subcommand("train", "Train one model and evaluate it on the test split");
    std::string tr_config, tr_out_dir;
    tr->add_option("--config", tr_config, "Experiment config file")->required();
    tr->add_option("--out-dir", tr_out_dir, "Output directory (default VOLCAST_OUT_DIR or ./volcast-out)");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Evaluate a saved checkpoint on the test split");
    std::string ev_config, ev_ckpt, ev_out_dir;
    ev->add_option("--config", ev_config, "Experiment config file")->required();
    ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file from train")->required();
    ev->add_option("--out-dir", ev_out_dir, "Output directory (default VOLCAST_OUT_DIR or ./volcast-out)");

    // plot
    auto* pl = app.add_subcommand("plot", "Render daily-metric CSVs as a line chart");
    std::vector<std::string> pl_daily;
    std::string pl_out = "daily_mape.svg", pl_title = "Daily volatility MAPE on the test split";
    pl->add_option("--daily", pl_daily, "Daily metrics CSV (repeatable)")->required();
    pl->add_option("--out", pl_out, "Output vector-graphics file");
    pl->add_option("--title", pl_title, "Chart title");

    // run-all
    auto* ra = app.add_subcommand("run-all", "Train all five models plus the persistence baseline");
    std::string ra_config, ra_out_dir;
    ra->add_option("--config", ra_config, "Shared experiment config file")->required();
    ra->add_option("--out-dir", ra_out_dir, "Output directory (default VOLCAST_OUT_DIR or ./volcast-out)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return generate_data(gen_out, gen_days, gen_seed, gen_base, gen_curv, gen_slope,
                                 gen_spot, gen_rate, gen_shocks);
        if (ing->parsed()) return ingest(ing_quotes, ing_out);
        if (tr->parsed()) return train_cmd(tr_config, tr_out_dir);
        if (ev->parsed()) return evaluate_cmd(ev_config, ev_ckpt, ev_out_dir);
        if (pl->parsed()) return plot_cmd(pl_daily, pl_out, pl_title);
        if (ra->parsed()) return run_all_cmd(ra_config, ra_out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
