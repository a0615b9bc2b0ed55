// Command line surface: dataset generation, training, evaluation, scaling
// benchmarks, quadrature verification, and the k-chain classification probe.
// Config files are flat `key = value` text; `#` starts a comment. Unknown
// keys are rejected so typos never silently fall back to defaults.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "efa/data.hpp"
#include "efa/lebedev.hpp"
#include "efa/model.hpp"
#include "efa/train.hpp"

namespace {

using efa::check;

std::string trim(const std::string& s) {
    const char* ws = " \t\r\n";
    const size_t a = s.find_first_not_of(ws);
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(ws);
    return s.substr(a, b - a + 1);
}

// Flat key = value config with comment stripping and strict key accounting.
class KeyValues {
public:
    explicit KeyValues(const std::string& path) : path_(path) {
        std::ifstream in(path);
        check(in.good(), "config: cannot open '" + path + "'");
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            const size_t eq = line.find('=');
            check(eq != std::string::npos,
                  path + ":" + std::to_string(lineno) + ": expected 'key = value'");
            const std::string key = trim(line.substr(0, eq));
            const std::string val = trim(line.substr(eq + 1));
            check(!key.empty(), path + ":" + std::to_string(lineno) + ": empty key");
            check(!kv_.count(key),
                  path + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
            kv_[key] = val;
        }
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string require(const std::string& key) {
        check(has(key), path_ + ": missing required key '" + key + "'");
        used_.insert(key);
        return kv_.at(key);
    }

    std::string get(const std::string& key, const std::string& def) {
        if (!has(key)) return def;
        used_.insert(key);
        return kv_.at(key);
    }

    double get_double(const std::string& key, double def) {
        if (!has(key)) return def;
        return parse_double(key, require(key));
    }

    double require_double(const std::string& key) { return parse_double(key, require(key)); }

    int get_int(const std::string& key, int def) {
        if (!has(key)) return def;
        return parse_int(key, require(key));
    }

    int require_int(const std::string& key) { return parse_int(key, require(key)); }

    std::uint64_t get_u64(const std::string& key, std::uint64_t def) {
        if (!has(key)) return def;
        const std::string v = require(key);
        try {
            return std::stoull(v);
        } catch (...) {
            check(false, path_ + ": key '" + key + "': expected an unsigned integer, got '" + v + "'");
        }
        return 0;
    }

    bool get_bool(const std::string& key, bool def) {
        if (!has(key)) return def;
        const std::string v = require(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        check(false, path_ + ": key '" + key + "': expected a boolean, got '" + v + "'");
        return false;
    }

    std::vector<int> get_int_list(const std::string& key, const std::string& def) {
        const std::string v = get(key, def);
        std::vector<int> out;
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item.empty()) continue;
            out.push_back(parse_int(key, item));
        }
        check(!out.empty(), path_ + ": key '" + key + "': empty list");
        return out;
    }

    // call after reading everything: rejects unknown keys
    void finish() const {
        for (const auto& [k, v] : kv_)
            check(used_.count(k) != 0, path_ + ": unknown key '" + k + "'");
    }

private:
    double parse_double(const std::string& key, const std::string& v) const {
        if (v == "inf" || v == "infinity") return std::numeric_limits<double>::infinity();
        try {
            size_t pos = 0;
            const double d = std::stod(v, &pos);
            check(pos == v.size(), "");
            return d;
        } catch (...) {
            check(false, path_ + ": key '" + key + "': expected a number, got '" + v + "'");
        }
        return 0.0;
    }

    int parse_int(const std::string& key, const std::string& v) const {
        try {
            size_t pos = 0;
            const int i = std::stoi(v, &pos);
            check(pos == v.size(), "");
            return i;
        } catch (...) {
            check(false, path_ + ": key '" + key + "': expected an integer, got '" + v + "'");
        }
        return 0;
    }

    std::map<std::string, std::string> kv_;
    std::set<std::string> used_;
    std::string path_;
};

// Model keys shared by `train` and `bench-scaling` configs.
efa::ModelConfig model_from_config(KeyValues& c, int default_T) {
    efa::ModelConfig m;
    m.T = c.get_int("T", default_T);
    m.H = c.get_int("H", 16);
    m.L_feat = c.get_int("L_feat", 1);
    m.L_Y_mp = c.get_int("L_Y_mp", 1);
    m.num_species = c.get_int("num_species", 2);
    m.rbf_size = c.get_int("rbf_size", 32);
    m.r_cut = c.get_double("r_cut", 5.0);
    m.use_efa = c.get_bool("use_efa", true);
    if (m.use_efa) {
        m.efa.D_qk = c.get_int("efa_d_qk", 16);
        m.efa.D_v = c.get_int("efa_d_v", m.H);
        m.efa.L_qk = c.get_int("efa_l_qk", 1);
        m.efa.L_v = c.get_int("efa_l_v", 1);
        m.efa.L_Y = c.get_int("efa_l_y", 0);
        m.efa.L_out = m.L_feat;
        m.efa.G = c.get_int("efa_g", 50);
        const double tol = c.get_double("efa_tol", 1e-5);
        const double r_max = c.get_double("efa_r_max", 30.0);
        const std::string spacing = c.get("efa_spacing", "linear");
        efa::FrequencySpacing sp;
        if (spacing == "linear")
            sp = efa::FrequencySpacing::kLinear;
        else if (spacing == "geometric")
            sp = efa::FrequencySpacing::kGeometric;
        else
            check(false, "config: efa_spacing must be 'linear' or 'geometric'");
        const double b_max = efa::calibrate_bmax(m.efa.G, tol).b_max;
        m.efa.freqs = efa::build_frequencies_for_range(m.efa.D_qk, b_max, r_max, sp);
        const std::string fm = c.get("efa_feature_map", "gated_gelu");
        if (fm == "identity")
            m.efa.feature_map = efa::FeatureMap::kIdentity;
        else if (fm == "gated_gelu")
            m.efa.feature_map = efa::FeatureMap::kGatedGelu;
        else
            check(false, "config: efa_feature_map must be 'identity' or 'gated_gelu'");
    }
    m.prepare();
    return m;
}

int run_gen_data(const std::string& cfg_path) {
    KeyValues c(cfg_path);
    const std::string kind = c.require("kind");
    efa::Rng rng(c.get_u64("seed", 1));

    auto write = [](const std::string& path, const std::vector<efa::Structure>& set) {
        efa::save_dataset(path, set);
        std::cout << path << ": " << set.size() << " structures\n";
    };

    if (kind == "two_particle" || kind == "charge_dipole") {
        const double r_min = c.get_double("r_min", 0.8);
        const double r_max = c.get_double("r_max", 30.0);
        const double test_r_min = c.get_double("test_r_min", r_min);
        const double test_r_max = c.get_double("test_r_max", r_max);
        auto gen = [&](int n, double lo, double hi) {
            return kind == "two_particle" ? efa::gen_two_particle(n, lo, hi, rng)
                                          : efa::gen_charge_dipole(n, lo, hi, rng);
        };
        if (c.has("out_train"))
            write(c.require("out_train"), gen(c.require_int("count_train"), r_min, r_max));
        if (c.has("out_val"))
            write(c.require("out_val"), gen(c.require_int("count_val"), r_min, r_max));
        if (c.has("out_test"))
            write(c.require("out_test"),
                  gen(c.require_int("count_test"), test_r_min, test_r_max));
    } else if (kind == "screened_pair") {
        const double r_min = c.get_double("r_min", 1.0);
        const double r_max = c.get_double("r_max", 30.0);
        const double alpha = c.get_double("alpha", 0.25);
        if (c.has("out_train"))
            write(c.require("out_train"),
                  efa::gen_screened_pair(c.require_int("count_train"), r_min, r_max, alpha, rng));
        if (c.has("out_val"))
            write(c.require("out_val"),
                  efa::gen_screened_pair(c.require_int("count_val"), r_min, r_max, alpha, rng));
    } else if (kind == "cluster") {
        const std::vector<int> diameters = c.get_int_list("diameters", "10,14,18,22,26,30");
        const int per_size = c.get_int("count_per_size", 4);
        const double density = c.get_double("density", 0.075);
        const double alpha = c.get_double("alpha", 0.25);
        std::vector<efa::Structure> all;
        for (const int d : diameters) {
            auto set = efa::gen_screened_cluster(per_size, d, density, alpha, rng);
            all.insert(all.end(), set.begin(), set.end());
        }
        write(c.require("out"), all);
    } else if (kind == "kchains") {
        const std::vector<int> ks = c.get_int_list("ks", "2,4,6,8");
        std::vector<efa::Structure> all;
        for (const int k : ks) {
            auto [g1, g2] = efa::gen_kchain_pair(k);
            all.push_back(std::move(g1));
            all.push_back(std::move(g2));
        }
        write(c.require("out"), all);
    } else {
        check(false,
              "gen-data: unknown kind '" + kind +
                  "' (expected two_particle, charge_dipole, screened_pair, cluster, kchains)");
    }
    c.finish();
    return 0;
}

int run_train(const std::string& cfg_path) {
    KeyValues c(cfg_path);
    efa::TrainConfig tc;
    tc.model = model_from_config(c, 2);
    tc.lambda_e = c.get_double("lambda_e", 0.01);
    tc.lambda_f = c.get_double("lambda_f", 0.99);
    tc.batch = c.get_int("batch", 32);
    tc.epochs = c.get_int("epochs", 100);
    tc.lr_init = c.get_double("lr_init", 1e-3);
    tc.lr_final = c.get_double("lr_final", 1e-5);
    tc.seed = c.get_u64("seed", 1);

    const std::vector<efa::Structure> train_set = efa::load_dataset(c.require("train_data"));
    std::vector<efa::Structure> val_set;
    if (c.has("val_data")) val_set = efa::load_dataset(c.require("val_data"));
    const std::string out_ckpt = c.require("out_checkpoint");
    const std::string out_metrics = c.get("out_metrics", "");
    c.finish();

    const efa::TrainResult res = efa::train_force_field(tc, train_set, val_set);

    efa::save_checkpoint(out_ckpt, tc.model, res.best);
    if (!out_metrics.empty()) {
        std::ofstream m(out_metrics);
        check(m.good(), "train: cannot write metrics file '" + out_metrics + "'");
        m << "epoch,train_loss,val_loss,lr\n";
        m.precision(12);
        for (const efa::EpochStats& e : res.history)
            m << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << '\n';
    }
    std::cout.precision(12);
    std::cout << "epochs: " << res.history.size() << "\n";
    if (!res.history.empty()) {
        std::cout << "final train loss: " << res.history.back().train_loss << "\n";
        std::cout << "best epoch: " << res.best_epoch << " (selection loss " << res.best_val
                  << ")\n";
    }
    std::cout << "checkpoint: " << out_ckpt << "\n";
    return 0;
}

int run_evaluate(const std::string& ckpt, const std::string& data,
                 const std::string& residuals) {
    efa::ModelConfig cfg;
    efa::ModelParams params;
    efa::load_checkpoint(ckpt, &cfg, &params);
    const std::vector<efa::Structure> set = efa::load_dataset(data);

    std::vector<std::array<double, 4>> rows;
    const efa::Metrics m =
        efa::evaluate_model(params, cfg, set, residuals.empty() ? nullptr : &rows);

    if (!residuals.empty()) {
        std::ofstream r(residuals);
        check(r.good(), "evaluate: cannot write residuals file '" + residuals + "'");
        r << "energy_true,energy_pred,atoms,force_rmse\n";
        r.precision(17);
        for (const auto& row : rows)
            r << row[0] << ',' << row[1] << ',' << row[2] << ',' << row[3] << '\n';
    }

    std::cout.precision(17);
    std::cout << "metric,value\n";
    std::cout << "e_mae," << m.e_mae << "\n";
    std::cout << "e_rmse," << m.e_rmse << "\n";
    std::cout << "e_mae_per_atom," << m.e_mae_per_atom << "\n";
    std::cout << "e_rmse_per_atom," << m.e_rmse_per_atom << "\n";
    std::cout << "f_mae," << m.f_mae << "\n";
    std::cout << "f_rmse," << m.f_rmse << "\n";
    std::cout << "n_structures," << m.n_structures << "\n";
    std::cout << "n_force_components," << m.n_components << "\n";
    std::cout << "seconds," << m.seconds << "\n";
    return 0;
}

int run_bench(const std::string& cfg_path) {
    KeyValues c(cfg_path);
    const efa::ModelConfig model = model_from_config(c, 1);
    const std::vector<int> sizes = c.get_int_list("sizes", "64,128,256,512,1024,2048,4096");
    const std::vector<int> oracle_sizes = c.get_int_list("oracle_sizes", "256,512,1024,2048");
    const bool run_oracle = c.get_bool("run_oracle", true);
    const int repeats = c.get_int("repeats", 3);
    const std::uint64_t seed = c.get_u64("seed", 1);
    c.finish();
    for (size_t i = 1; i < sizes.size(); ++i)
        check(sizes[i] > sizes[i - 1], "bench-scaling: sizes must be sorted ascending");

    const std::vector<efa::BenchPoint> fused = efa::bench_fused(model, sizes, repeats, seed);
    std::vector<efa::BenchPoint> oracle;
    if (run_oracle && model.use_efa)
        oracle = efa::bench_oracle(model.efa, model.H, oracle_sizes, repeats, seed);

    std::cout.precision(12);
    std::cout << "path,n,median_seconds\n";
    for (const efa::BenchPoint& p : fused)
        std::cout << "fused," << p.n << ',' << p.seconds << "\n";
    for (const efa::BenchPoint& p : oracle)
        std::cout << "oracle," << p.n << ',' << p.seconds << "\n";

    const efa::LinearFit fit = efa::fit_linear(fused);
    std::cout << "\nlinear fit (fused): slope=" << fit.slope << " s/atom, intercept="
              << fit.intercept << " s, r2=" << fit.r2 << "\n";
    if (oracle.size() >= 2) {
        std::cout << "oracle doubling ratios:";
        for (size_t i = 1; i < oracle.size(); ++i)
            if (oracle[i].n == 2 * oracle[i - 1].n)
                std::cout << ' ' << oracle[i].n << '/' << oracle[i - 1].n << '='
                          << oracle[i].seconds / oracle[i - 1].seconds;
        std::cout << "\n";
    }
    return 0;
}

int run_verify_quadrature(const std::vector<int>& grids, double tol) {
    std::cout.precision(12);
    std::cout << "G,b_max,b_max_over_pi\n";
    for (const int g : grids) {
        const efa::BmaxRecord rec = efa::calibrate_bmax(g, tol);
        std::cout << g << ',' << rec.b_max << ',' << rec.b_max / efa::kPi << "\n";
    }
    return 0;
}

std::vector<int> parse_k_list(const std::string& spec) {
    const size_t dots = spec.find("..");
    std::vector<int> ks;
    if (dots != std::string::npos) {
        const int lo = std::stoi(spec.substr(0, dots));
        const int hi = std::stoi(spec.substr(dots + 2));
        check(lo >= 1 && hi >= lo, "classify-kchains: bad --k range");
        for (int k = lo; k <= hi; ++k) ks.push_back(k);
    } else {
        std::stringstream ss(spec);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) ks.push_back(std::stoi(item));
        }
        check(!ks.empty(), "classify-kchains: empty --k list");
    }
    return ks;
}

int run_classify_kchains(const std::string& kspec, std::uint64_t seed) {
    const std::vector<int> ks = parse_k_list(kspec);
    std::cout << "k,model,layers,accuracy\n";
    for (const int k : ks) {
        const double efa_acc = efa::kchain_accuracy(k, /*use_efa=*/true, /*T=*/1, seed);
        std::cout << k << ",mp+efa,1," << efa_acc << "\n";
        const int t_needed = k / 2 + 1;
        for (int t = 1; t <= t_needed; ++t) {
            const double acc = efa::kchain_accuracy(k, /*use_efa=*/false, t, seed);
            std::cout << k << ",mp," << t << ',' << acc << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"equivariant force fields with linear-scaling Euclidean fast attention"};
    app.require_subcommand(1);

    std::string gen_cfg;
    CLI::App* gen = app.add_subcommand("gen-data", "generate a dataset from a config file");
    gen->add_option("config", gen_cfg, "dataset config (key = value)")->required();

    std::string train_cfg;
    CLI::App* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("config", train_cfg, "training config (key = value)")->required();

    std::string eval_ckpt, eval_data, eval_residuals;
    CLI::App* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset");
    ev->add_option("checkpoint", eval_ckpt, "model checkpoint")->required();
    ev->add_option("data", eval_data, "dataset file")->required();
    ev->add_option("--residuals", eval_residuals, "write per-sample residual CSV here");

    std::string bench_cfg;
    CLI::App* bench = app.add_subcommand("bench-scaling", "measure wall-clock scaling in N");
    bench->add_option("config", bench_cfg, "bench config (key = value)")->required();

    std::string grid_spec = "6,14,26,38,50,86,110,146,194,230,302,434,590,770,974";
    std::string tol_spec = "1e-5";
    CLI::App* vq = app.add_subcommand("verify-quadrature",
                                      "print measured phase bounds per grid size (CSV)");
    vq->add_option("--grids", grid_spec, "comma-separated grid sizes");
    vq->add_option("--tol", tol_spec, "calibration tolerance (a number, or 'inf')");

    std::string kspec = "2..8";
    std::uint64_t kseed = 1;
    CLI::App* kc = app.add_subcommand("classify-kchains",
                                      "k-chain isomer classification probe (CSV)");
    kc->add_option("--k", kspec, "k values: a range like 2..8 or a comma list");
    kc->add_option("--seed", kseed, "parameter seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return run_gen_data(gen_cfg);
        if (train->parsed()) return run_train(train_cfg);
        if (ev->parsed()) return run_evaluate(eval_ckpt, eval_data, eval_residuals);
        if (bench->parsed()) return run_bench(bench_cfg);
        if (vq->parsed()) {
            std::vector<int> grids;
            std::stringstream ss(grid_spec);
            std::string item;
            while (std::getline(ss, item, ',')) grids.push_back(std::stoi(trim(item)));
            const double tol = (trim(tol_spec) == "inf" || trim(tol_spec) == "infinity")
                                   ? std::numeric_limits<double>::infinity()
                                   : std::stod(tol_spec);
            return run_verify_quadrature(grids, tol);
        }
        if (kc->parsed()) return run_classify_kchains(kspec, kseed);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
