// Command-line driver: training, surgery, verification, inspection, and the
// timing/LR experiments. All subcommands accept --f64 for double precision
// and --config-file for flat key=value defaults (flags override).

#include <cstdio>
#include <filesystem>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tcnn/checkpoint.hpp"
#include "tcnn/data.hpp"
#include "tcnn/gpsa.hpp"
#include "tcnn/model.hpp"
#include "tcnn/reparam.hpp"
#include "tcnn/train.hpp"

namespace {

struct CommonOpts {
    bool f64 = false;
    std::string model_config = "tiny";
    std::string data = "synthetic";
    std::size_t train_n = 8000, test_n = 2000;
    std::size_t resolution = 32;
    std::uint64_t seed = 0;
};

tcnn::ModelConfig pick_config(const CommonOpts& c) {
    tcnn::ModelConfig cfg;
    if (c.model_config == "tiny")
        cfg = tcnn::tiny_config(c.seed);
    else if (c.model_config == "desk")
        cfg = tcnn::desk_config(c.seed);
    else if (c.model_config == "small")
        cfg = tcnn::small_config(c.seed);
    else
        throw CLI::ValidationError("--model must be tiny, desk or small");
    cfg.input_resolution = c.resolution;
    return cfg;
}

template <typename T>
std::pair<tcnn::Dataset<T>, tcnn::Dataset<T>> load_data(const CommonOpts& c) {
    if (c.data == "synthetic") {
        return {tcnn::gen_synthetic<T>(c.train_n, c.resolution, 10, c.seed),
                tcnn::gen_synthetic<T>(c.test_n, c.resolution, 10,
                                       c.seed + 1)};
    }
    if (c.data.rfind("cifar:", 0) == 0) {
        std::filesystem::path dir = c.data.substr(6);
        std::vector<std::string> train_files;
        for (int i = 1; i <= 5; ++i)
            train_files.push_back(
                (dir / ("data_batch_" + std::to_string(i) + ".bin")).string());
        return {tcnn::load_cifar10<T>(train_files),
                tcnn::load_cifar10<T>({(dir / "test_batch.bin").string()})};
    }
    throw CLI::ValidationError("--data must be synthetic or cifar:<dir>");
}

void add_common(CLI::App* app, CommonOpts& c) {
    app->add_flag("--f64", c.f64, "use double precision");
    app->add_option("--model", c.model_config, "model config: tiny|desk|small");
    app->add_option("--data", c.data, "synthetic or cifar:<dir>");
    app->add_option("--train-n", c.train_n, "synthetic train set size");
    app->add_option("--test-n", c.test_n, "synthetic test set size");
    app->add_option("--res", c.resolution, "input resolution");
    app->add_option("--seed", c.seed, "RNG seed");
    app->set_config("--config-file", "", "key=value defaults");
}

tcnn::InitMode parse_mode(const std::string& s) {
    if (s == "paper") return tcnn::InitMode::paper();
    if (s == "strict") return tcnn::InitMode::strict();
    throw CLI::ValidationError("--mode must be paper or strict");
}

// ---------------------------------------------------------------------------

template <typename T>
int run_train(const CommonOpts& c, std::size_t epochs, std::size_t batch,
              double max_lr, double dr, bool hybrid, const std::string& out,
              const std::string& metrics) {
    auto [train_set, test_set] = load_data<T>(c);
    tcnn::Model<T> model = tcnn::build_cnn<T>(pick_config(c), dr);
    if (hybrid)
        model = tcnn::transform_last_stage(model, tcnn::InitMode::paper(), 0)
                    .first;
    tcnn::TrainPlan plan = tcnn::TrainPlan::from_scratch(epochs);
    plan.batch_size = batch;
    plan.max_lr = max_lr;
    plan.min_lr = max_lr / 100.0;
    plan.d_r = dr;
    plan.seed = c.seed;
    plan.resolution = c.resolution;
    tcnn::MetricsLog log;
    tcnn::OptState<T> opt;
    tcnn::train_epochs(model, train_set, test_set, plan, log, opt);
    if (!metrics.empty()) log.write_csv(metrics);
    if (!out.empty()) tcnn::save_checkpoint(out, model, &opt);
    if (!log.rows.empty())
        std::cout << "final train_acc " << log.rows.back().train_acc
                  << " test_acc " << log.rows.back().test_acc << "\n";
    return 0;
}

template <typename T>
int run_transform(const std::string& in, const std::string& out,
                  const std::string& mode, std::size_t probes, double tol,
                  const std::string& report_path) {
    auto loaded = tcnn::load_checkpoint<T>(in);
    auto [hybrid, report] = tcnn::transform_last_stage(
        loaded.model, parse_mode(mode), probes, tol);
    std::cout << report.text();
    if (!report_path.empty()) report.write_kv(report_path);
    if (!out.empty()) tcnn::save_checkpoint(out, hybrid);
    return report.pass ? 0 : 1;
}

template <typename T>
int run_finetune(const CommonOpts& c, const std::string& in,
                 const std::string& out, std::size_t epochs, double max_lr,
                 double gating_lr, double dr, const std::string& metrics) {
    auto loaded = tcnn::load_checkpoint<T>(in);
    tcnn::Model<T> model = std::move(loaded.model);
    if (!model.config.transformed)
        model = tcnn::transform_last_stage(model, tcnn::InitMode::paper(), 0)
                    .first;
    auto [train_set, test_set] = load_data<T>(c);
    tcnn::TrainPlan plan = tcnn::TrainPlan::finetune(epochs, max_lr);
    plan.gating_lr = gating_lr;
    plan.d_r = dr;
    plan.seed = c.seed;
    plan.resolution = c.resolution;
    tcnn::MetricsLog log;
    tcnn::OptState<T> opt;
    tcnn::train_epochs(model, train_set, test_set, plan, log, opt);
    if (!metrics.empty()) log.write_csv(metrics);
    if (!out.empty()) tcnn::save_checkpoint(out, model, &opt);
    if (!log.rows.empty())
        std::cout << "final test_acc " << log.rows.back().test_acc << "\n";
    return 0;
}

template <typename T>
int run_verify(const std::string& in, const std::string& other,
               std::size_t probes, double tol, std::size_t res,
               std::uint64_t seed) {
    auto a = tcnn::load_checkpoint<T>(in);
    tcnn::SurgeryReport rep;
    if (!other.empty()) {
        auto b = tcnn::load_checkpoint<T>(other);
        rep = tcnn::verify_equivalence(a.model, b.model, probes, tol, res,
                                       seed);
    } else {
        auto [hybrid, r] =
            tcnn::transform_last_stage(a.model, tcnn::InitMode::strict(), 0);
        (void)r;
        rep = tcnn::verify_equivalence(a.model, hybrid, probes, tol, res,
                                       seed);
    }
    std::cout << "max_abs_deviation " << rep.max_abs_deviation << "\n"
              << "max_rel_deviation " << rep.max_rel_deviation << "\n"
              << (rep.pass ? "PASS" : "FAIL") << "\n";
    return rep.pass ? 0 : 1;
}

template <typename T>
int run_inspect(const CommonOpts& c, const std::string& in, long image_idx,
                std::size_t qr, std::size_t qc, const std::string& outdir) {
    auto loaded = tcnn::load_checkpoint<T>(in);
    tcnn::Model<T> model = std::move(loaded.model);
    std::filesystem::create_directories(outdir);

    // Head statistics CSV.
    {
        std::ofstream f(outdir + "/heads.csv");
        f << "layer,head,gate,span\n";
        auto layers = tcnn::gpsa_layers(model);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto gates = tcnn::gating_values(*layers[l].second);
            auto spans = tcnn::attention_span(*layers[l].second);
            for (std::size_t h = 0; h < gates.size(); ++h)
                f << l << "," << h << "," << gates[h] << "," << spans[h]
                  << "\n";
        }
    }

    // Attention maps on one input image.
    auto [train_set, test_set] = load_data<T>(c);
    (void)test_set;
    std::size_t idx = image_idx < 0 ? 0 : static_cast<std::size_t>(image_idx);
    auto [x, y] = train_set.batch({idx}, c.resolution);
    (void)y;
    model.training = false;
    std::size_t layer_no = 0;
    tcnn::ForwardCtx<T> ctx;
    ctx.training = false;
    ctx.gpsa_hook = [&](const std::string& name, const tcnn::GpsaLayer<T>& g,
                        const tcnn::Tensor<T>& seq, std::size_t Hp,
                        std::size_t Wp) {
        (void)name;
        tcnn::Tensor<T> one =
            tcnn::reshape(seq, {seq.dim(1), seq.dim(2)});  // batch of 1
        std::size_t r = std::min(qr, Hp - 1), cc = std::min(qc, Wp - 1);
        auto maps = tcnn::attention_map_at(g, one, Hp, Wp, r, cc);
        for (std::size_t h = 0; h < maps.size(); ++h)
            tcnn::write_pgm(outdir + "/attn_L" + std::to_string(layer_no) +
                                "_H" + std::to_string(h) + ".pgm",
                            maps[h], Hp, Wp);
        ++layer_no;
    };
    tcnn::NoGradGuard ng;
    tcnn::forward_features(model, x, ctx);
    std::cout << "wrote " << outdir << "/heads.csv and attention maps for "
              << layer_no << " GPSA layer(s)\n";
    return 0;
}

template <typename T>
int run_eval(const CommonOpts& c, const std::string& in) {
    auto loaded = tcnn::load_checkpoint<T>(in);
    auto [train_set, test_set] = load_data<T>(c);
    (void)train_set;
    auto [loss, acc] =
        tcnn::evaluate(loaded.model, test_set, 128, c.resolution);
    std::cout << "test_loss " << loss << " test_acc " << acc << "\n";
    return 0;
}

template <typename T>
int run_experiment(const CommonOpts& c, std::size_t t1, std::size_t t2,
                   bool same_opt, std::size_t batch, double max_lr, double dr,
                   const std::string& metrics, const std::string& out) {
    auto [train_set, test_set] = load_data<T>(c);
    tcnn::TrainPlan base = tcnn::TrainPlan::from_scratch(t1 + t2);
    base.batch_size = batch;
    base.max_lr = max_lr;
    base.min_lr = max_lr / 100.0;
    base.d_r = dr;
    base.seed = c.seed;
    base.resolution = c.resolution;
    tcnn::TrainPlan ft = tcnn::TrainPlan::finetune(t2);
    ft.batch_size = batch;
    ft.seed = c.seed;
    ft.resolution = c.resolution;
    auto res = tcnn::schedule_experiment(pick_config(c), train_set, test_set,
                                         t1, t2, same_opt, base, ft);
    if (!metrics.empty()) res.log.write_csv(metrics);
    if (!out.empty()) tcnn::save_checkpoint(out, res.model);
    std::cout << "t1 " << res.t1 << " t2 " << res.t2 << " same_optimizer "
              << res.same_optimizer << " final_train_acc "
              << res.final_train_acc << " final_test_acc "
              << res.final_test_acc << "\n";
    return 0;
}

template <typename T>
int run_lr_sweep(const CommonOpts& c, const std::string& in,
                 const std::vector<double>& lrs, std::size_t epochs,
                 const std::string& prefix) {
    auto loaded = tcnn::load_checkpoint<T>(in);
    auto [train_set, test_set] = load_data<T>(c);
    tcnn::TrainPlan plan = tcnn::TrainPlan::finetune(epochs);
    plan.seed = c.seed;
    plan.resolution = c.resolution;
    auto logs = tcnn::lr_sweep(loaded.model, train_set, test_set, lrs, plan);
    for (std::size_t i = 0; i < logs.size(); ++i) {
        std::string path = prefix + std::to_string(i) + ".csv";
        logs[i].write_csv(path);
        double dip = 1.0;
        for (const auto& row : logs[i].rows) dip = std::min(dip, row.test_acc);
        std::cout << "lr " << lrs[i] << " log " << path << " min_test_acc "
                  << dip << "\n";
    }
    return 0;
}

template <typename T>
int run_gradcheck(std::uint64_t seed) {
    using tcnn::Tensor;
    std::mt19937_64 rng(seed);
    std::size_t d_in = 4, k = 3, H = 4, W = 4;
    tcnn::ConvLayer<T> conv =
        tcnn::ConvLayer<T>::he_init(d_in, d_in, k, 1, 1, rng, true);
    tcnn::GpsaLayer<T> layer =
        tcnn::conv_to_gpsa(conv, tcnn::InitMode::paper());
    for (std::size_t h = 0; h < layer.n_heads; ++h) {
        layer.w_qry[h] = Tensor<T>::randn(layer.w_qry[h].shape(), rng, T(0.3));
        layer.w_key[h] = Tensor<T>::randn(layer.w_key[h].shape(), rng, T(0.3));
    }
    std::vector<Tensor<T>> leaves;
    auto names = std::vector<std::string>{};
    for (std::size_t h = 0; h < layer.n_heads; ++h) {
        leaves.push_back(layer.w_qry[h]);
        leaves.push_back(layer.w_key[h]);
        leaves.push_back(layer.w_out[h]);
        leaves.push_back(layer.alpha_raw[h]);
        leaves.push_back(layer.center[h]);
        leaves.push_back(layer.gate[h]);
    }
    leaves.push_back(layer.w_val);
    leaves.push_back(layer.bias);
    Tensor<T> x = Tensor<T>::randn({1, H * W, d_in}, rng, T(1));
    auto f = [&](const std::vector<Tensor<T>>&) {
        return tcnn::reduce(tcnn::gpsa_forward(x, layer, H, W),
                            tcnn::Reduce::Sum);
    };
    T eps = std::is_same_v<T, double> ? T(1e-5) : T(1e-2);
    double tol = std::is_same_v<T, double> ? 1e-5 : 5e-2;
    auto rep = tcnn::gradcheck<T>(f, leaves, eps, tol);
    std::cout << "gpsa gradcheck max_rel_err " << rep.max_rel_err << " "
              << (rep.pass ? "PASS" : "FAIL") << "\n";
    return rep.pass ? 0 : 1;
}

std::vector<double> parse_lrs(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    tcnn::use_single_blas_thread();
#ifdef __GLIBC__
    // Large short-lived buffers dominate training; keep them on the heap
    // instead of round-tripping through mmap/munmap.
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
    CLI::App app{"Transformed-CNN workbench: GPSA layers, conv->attention "
                 "surgery, training and analysis"};
    app.require_subcommand(1);

    CommonOpts c;
    std::string in, other, out, mode = "strict", metrics, report_path;
    std::string outdir = "inspect_out", prefix = "lr_sweep_", lrs_csv =
        "1e-5,1e-4,1e-3";
    std::size_t epochs = 40, batch = 64, probes = 8, t1 = 0, t2 = 0, qr = 0,
                qc = 0;
    long image_idx = 0;
    double max_lr = 0.05, ft_lr = 1e-4, gating_lr = 0.1, dr = 0.0, tol = 1e-3;
    bool hybrid = false, same_opt = true;

    auto* train = app.add_subcommand("train", "train a CNN (or hybrid) from scratch");
    add_common(train, c);
    train->add_option("--epochs", epochs);
    train->add_option("--batch", batch);
    train->add_option("--max-lr", max_lr);
    train->add_option("--dr", dr, "stochastic depth rate");
    train->add_flag("--hybrid", hybrid, "transform before training (t1=0)");
    train->add_option("--out", out, "checkpoint path");
    train->add_option("--metrics", metrics, "CSV path");

    auto* transform = app.add_subcommand("transform", "conv->GPSA surgery on a checkpoint");
    add_common(transform, c);
    transform->add_option("--in", in)->required();
    transform->add_option("--out", out);
    transform->add_option("--mode", mode, "paper|strict");
    transform->add_option("--probes", probes);
    transform->add_option("--tol", tol);
    transform->add_option("--report", report_path);

    auto* finetune = app.add_subcommand("finetune", "fine-tune a (transformed) checkpoint");
    add_common(finetune, c);
    finetune->add_option("--in", in)->required();
    finetune->add_option("--out", out);
    finetune->add_option("--epochs", epochs)->default_val(10);
    finetune->add_option("--max-lr", ft_lr);
    finetune->add_option("--gating-lr", gating_lr);
    finetune->add_option("--dr", dr);
    finetune->add_option("--metrics", metrics);

    auto* verify = app.add_subcommand("verify", "probe two models for functional equivalence");
    add_common(verify, c);
    verify->add_option("--in", in)->required();
    verify->add_option("--other", other, "second checkpoint (default: strict transform of --in)");
    verify->add_option("--probes", probes)->default_val(16);
    verify->add_option("--tol", tol);

    auto* inspect = app.add_subcommand("inspect", "dump gate/span CSV and attention PGMs");
    add_common(inspect, c);
    inspect->add_option("--in", in)->required();
    inspect->add_option("--image", image_idx);
    std::string query = "0,0";
    inspect->add_option("--query", query, "query pixel r,c");
    inspect->add_option("--outdir", outdir);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (use --res for resolution transfer)");
    add_common(eval, c);
    eval->add_option("--in", in)->required();

    auto* experiment = app.add_subcommand("experiment", "reparametrization-timing run (t1 + t2 epochs)");
    add_common(experiment, c);
    experiment->add_option("--t1", t1)->required();
    experiment->add_option("--t2", t2)->required();
    experiment->add_flag("--same-optimizer,!--fresh-optimizer", same_opt);
    experiment->add_option("--batch", batch);
    experiment->add_option("--max-lr", max_lr);
    experiment->add_option("--dr", dr);
    experiment->add_option("--metrics", metrics);
    experiment->add_option("--out", out);

    auto* sweep = app.add_subcommand("lr-sweep", "fine-tune under several max LRs");
    add_common(sweep, c);
    sweep->add_option("--in", in)->required();
    sweep->add_option("--lrs", lrs_csv, "comma-separated max LRs");
    sweep->add_option("--epochs", epochs)->default_val(10);
    sweep->add_option("--prefix", prefix, "output CSV prefix");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of GPSA gradients");
    add_common(gc, c);

    CLI11_PARSE(app, argc, argv);

    try {
        auto dispatch = [&](auto tag) -> int {
            using T = decltype(tag);
            if (app.got_subcommand(train))
                return run_train<T>(c, epochs, batch, max_lr, dr, hybrid, out,
                                    metrics);
            if (app.got_subcommand(transform))
                return run_transform<T>(in, out, mode, probes, tol,
                                        report_path);
            if (app.got_subcommand(finetune))
                return run_finetune<T>(c, in, out, epochs, ft_lr, gating_lr,
                                       dr, metrics);
            if (app.got_subcommand(verify))
                return run_verify<T>(in, other, probes, tol, c.resolution,
                                     c.seed);
            if (app.got_subcommand(inspect)) {
                if (std::sscanf(query.c_str(), "%zu,%zu", &qr, &qc) != 2)
                    throw std::runtime_error("--query must be r,c");
                return run_inspect<T>(c, in, image_idx, qr, qc, outdir);
            }
            if (app.got_subcommand(eval)) return run_eval<T>(c, in);
            if (app.got_subcommand(experiment))
                return run_experiment<T>(c, t1, t2, same_opt, batch, max_lr,
                                         dr, metrics, out);
            if (app.got_subcommand(sweep))
                return run_lr_sweep<T>(c, in, parse_lrs(lrs_csv), epochs,
                                       prefix);
            if (app.got_subcommand(gc)) return run_gradcheck<T>(c.seed);
            return 1;
        };
        return c.f64 ? dispatch(double{}) : dispatch(float{});
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
