#pragma once

// Optimizers (SGD with momentum, AdamW with decoupled decay), linear-warmup
// plus cosine-decay schedule, gating parameter groups with their own fixed
// learning rate, training/eval loops, and the reparametrization-timing and
// learning-rate-sweep experiment harnesses.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "tcnn/data.hpp"
#include "tcnn/model.hpp"
#include "tcnn/reparam.hpp"

namespace tcnn {

enum class OptKind { SgdMomentum, AdamW };

struct TrainPlan {
    OptKind optimizer = OptKind::SgdMomentum;
    double max_lr = 0.05;
    double min_lr = 0.0005;
    std::size_t warmup_epochs = 2;
    std::size_t total_epochs = 40;
    std::size_t batch_size = 64;
    double weight_decay = 5e-4;
    double momentum = 0.9;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double d_r = 0.0;          // stochastic depth
    double gating_lr = 0.1;    // fixed LR for lambda parameters
    std::uint64_t seed = 0;
    std::size_t resolution = 32;

    void validate() const {
        check(warmup_epochs <= total_epochs,
              "TrainPlan: warmup_epochs exceeds total_epochs");
        check(max_lr > 0 && min_lr > 0 && batch_size > 0,
              "TrainPlan: rates and batch size must be positive");
        check(d_r >= 0.0 && d_r < 1.0, "TrainPlan: d_r must be in [0,1)");
    }

    // Desk-scale fine-tuning recipe: AdamW, warmup to max_lr, cosine decay,
    // gating LR 0.1.
    static TrainPlan finetune(std::size_t epochs = 10, double max_lr = 1e-4) {
        TrainPlan p;
        p.optimizer = OptKind::AdamW;
        p.max_lr = max_lr;
        p.min_lr = max_lr / 100.0;
        p.warmup_epochs = std::min<std::size_t>(2, epochs);
        p.total_epochs = epochs;
        p.weight_decay = 0.01;
        return p;
    }

    static TrainPlan from_scratch(std::size_t epochs = 40) {
        TrainPlan p;
        p.optimizer = OptKind::SgdMomentum;
        p.max_lr = 0.05;
        p.min_lr = 0.0005;
        p.warmup_epochs = std::min<std::size_t>(2, epochs);
        p.total_epochs = epochs;
        p.weight_decay = 5e-4;
        return p;
    }
};

// Linear warmup from 0 to max_lr, then cosine decay to min_lr. The last
// warmup step is exactly max_lr and the last schedule step exactly min_lr.
inline double lr_at(std::size_t step, std::size_t steps_per_epoch,
                    const TrainPlan& plan) {
    std::size_t warmup = plan.warmup_epochs * steps_per_epoch;
    std::size_t total = plan.total_epochs * steps_per_epoch;
    check(step < std::max<std::size_t>(total, 1), "lr_at: step outside schedule");
    if (warmup > 0 && step < warmup)
        return plan.max_lr * static_cast<double>(step + 1) /
               static_cast<double>(warmup);
    if (total <= warmup + 1) return plan.max_lr;
    double progress = static_cast<double>(step - warmup) /
                      static_cast<double>(total - warmup - 1);
    return plan.min_lr + 0.5 * (plan.max_lr - plan.min_lr) *
                             (1.0 + std::cos(M_PI * progress));
}

template <typename T>
struct OptState {
    std::unordered_map<std::string, std::vector<T>> momentum;  // SGD
    std::unordered_map<std::string, std::vector<T>> m, v;      // AdamW
    std::size_t step = 0;
};

template <typename T>
void sgd_step(std::vector<ParamInfo<T>>& params, OptState<T>& state, double lr,
              double momentum, double weight_decay, double gating_lr) {
    for (auto& p : params) {
        auto& theta = p.tensor.data();
        auto& g = p.tensor.grad();
        if (g.size() != theta.size()) continue;  // no gradient this step
        auto& vel = state.momentum[p.name];
        if (vel.size() != theta.size()) vel.assign(theta.size(), T(0));
        double lr_eff = p.gate ? gating_lr : lr;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            T grad = g[i];
            if (p.decay) grad += static_cast<T>(weight_decay) * theta[i];
            vel[i] = static_cast<T>(momentum) * vel[i] + grad;
            theta[i] -= static_cast<T>(lr_eff) * vel[i];
        }
    }
    ++state.step;
}

template <typename T>
void adamw_step(std::vector<ParamInfo<T>>& params, OptState<T>& state,
                double lr, double beta1, double beta2, double eps,
                double weight_decay, double gating_lr) {
    std::size_t t = state.step + 1;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& p : params) {
        auto& theta = p.tensor.data();
        auto& g = p.tensor.grad();
        if (g.size() != theta.size()) continue;
        auto& m = state.m[p.name];
        auto& v = state.v[p.name];
        if (m.size() != theta.size()) m.assign(theta.size(), T(0));
        if (v.size() != theta.size()) v.assign(theta.size(), T(0));
        double lr_eff = p.gate ? gating_lr : lr;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            if (p.decay)
                theta[i] *= static_cast<T>(1.0 - lr_eff * weight_decay);
            m[i] = static_cast<T>(beta1) * m[i] +
                   static_cast<T>(1.0 - beta1) * g[i];
            v[i] = static_cast<T>(beta2) * v[i] +
                   static_cast<T>(1.0 - beta2) * g[i] * g[i];
            double mhat = static_cast<double>(m[i]) / bc1;
            double vhat = static_cast<double>(v[i]) / bc2;
            theta[i] -= static_cast<T>(lr_eff * mhat /
                                       (std::sqrt(vhat) + eps));
        }
    }
    ++state.step;
}

template <typename T>
struct ParamGroups {
    std::vector<ParamInfo<T>> gates;
    std::vector<ParamInfo<T>> rest;
};

template <typename T>
ParamGroups<T> param_groups(const Model<T>& model) {
    ParamGroups<T> groups;
    for (auto& p : collect_params(model))
        (p.gate ? groups.gates : groups.rest).push_back(p);
    return groups;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsLog {
    std::vector<std::string> head_columns;  // gate_/span_ column names
    struct Row {
        std::size_t epoch;
        double lr;
        double train_loss, train_acc, test_acc;
        std::vector<double> head_values;  // gates then spans, per column
    };
    std::vector<Row> rows;

    void write_csv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("cannot open " + path);
        f << csv();
    }

    std::string csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "epoch,lr,train_loss,train_acc,test_acc";
        for (const auto& c : head_columns) os << "," << c;
        os << "\n";
        for (const auto& r : rows) {
            os << r.epoch << "," << r.lr << "," << r.train_loss << ","
               << r.train_acc << "," << r.test_acc;
            for (double v : r.head_values) os << "," << v;
            os << "\n";
        }
        return os.str();
    }
};

template <typename T>
std::vector<std::string> head_column_names(Model<T>& model) {
    std::vector<std::string> cols;
    auto layers = gpsa_layers(model);
    for (std::size_t l = 0; l < layers.size(); ++l)
        for (std::size_t h = 0; h < layers[l].second->n_heads; ++h)
            cols.push_back("gate_L" + std::to_string(l) + "_H" +
                           std::to_string(h));
    for (std::size_t l = 0; l < layers.size(); ++l)
        for (std::size_t h = 0; h < layers[l].second->n_heads; ++h)
            cols.push_back("span_L" + std::to_string(l) + "_H" +
                           std::to_string(h));
    return cols;
}

template <typename T>
std::vector<double> head_column_values(Model<T>& model) {
    std::vector<double> vals;
    auto layers = gpsa_layers(model);
    for (auto& [name, g] : layers)
        for (T v : gating_values(*g)) vals.push_back(static_cast<double>(v));
    for (auto& [name, g] : layers)
        for (T v : attention_span(*g)) vals.push_back(static_cast<double>(v));
    return vals;
}

// ---------------------------------------------------------------------------
// Loops

template <typename T>
std::pair<double, double> evaluate(Model<T>& model, const Dataset<T>& data,
                                   std::size_t batch_size = 128,
                                   std::size_t resolution = 0) {
    bool was_training = model.training;
    model.training = false;
    NoGradGuard ng;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        std::size_t n = std::min(batch_size, data.size() - start);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), start);
        auto [x, y] = data.batch(idx, resolution);
        Tensor<T> logits = forward_classify(model, x);
        loss_sum += static_cast<double>(cross_entropy(logits, y).item()) *
                    static_cast<double>(n);
        std::size_t C = logits.dim(1);
        for (std::size_t b = 0; b < n; ++b) {
            const T* row = logits.data().data() + b * C;
            std::size_t am = std::max_element(row, row + C) - row;
            if (static_cast<int>(am) == y[b]) ++correct;
        }
    }
    model.training = was_training;
    return {loss_sum / static_cast<double>(data.size()),
            static_cast<double>(correct) / static_cast<double>(data.size())};
}

// Runs n_epochs of the plan starting at global epoch start_epoch (the LR
// schedule always spans plan.total_epochs). Appends one metrics row per
// completed epoch. Throws on NaN loss, naming the step.
template <typename T>
void train_epochs(Model<T>& model, const Dataset<T>& train_data,
                  const Dataset<T>& test_data, const TrainPlan& plan,
                  MetricsLog& log, OptState<T>& opt,
                  std::size_t start_epoch = 0,
                  std::optional<std::size_t> n_epochs = {},
                  bool augment = true) {
    plan.validate();
    std::size_t epochs = n_epochs.value_or(plan.total_epochs - start_epoch);
    if (epochs == 0) return;
    check(start_epoch + epochs <= plan.total_epochs,
          "train_epochs: epochs exceed the plan's schedule");
    std::size_t steps_per_epoch =
        (train_data.size() + plan.batch_size - 1) / plan.batch_size;
    std::mt19937_64 rng(plan.seed * 0x9e3779b97f4a7c15ULL + start_epoch + 1);
    auto groups = param_groups(model);
    std::vector<ParamInfo<T>> params = groups.rest;
    params.insert(params.end(), groups.gates.begin(), groups.gates.end());
    if (log.head_columns.empty()) log.head_columns = head_column_names(model);

    std::vector<std::size_t> order(train_data.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t e = 0; e < epochs; ++e) {
        std::size_t epoch = start_epoch + e;
        model.training = true;
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        double last_lr = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            std::size_t lo = s * plan.batch_size;
            std::size_t n = std::min(plan.batch_size, train_data.size() - lo);
            std::vector<std::size_t> idx(order.begin() + lo,
                                         order.begin() + lo + n);
            auto [x, y] = train_data.batch(idx, plan.resolution, augment,
                                           augment ? &rng : nullptr);
            for (auto& p : params) p.tensor.zero_grad();
            Tensor<T> logits = forward_classify(model, x, &rng);
            Tensor<T> loss = cross_entropy(logits, y);
            double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
                throw std::runtime_error(
                    "train_epochs: non-finite loss at epoch " +
                    std::to_string(epoch) + " step " + std::to_string(s));
            backward(loss);
            std::size_t global_step = epoch * steps_per_epoch + s;
            double lr = lr_at(global_step, steps_per_epoch, plan);
            last_lr = lr;
            if (plan.optimizer == OptKind::SgdMomentum)
                sgd_step(params, opt, lr, plan.momentum, plan.weight_decay,
                         plan.gating_lr);
            else
                adamw_step(params, opt, lr, plan.beta1, plan.beta2, plan.eps,
                           plan.weight_decay, plan.gating_lr);
            loss_sum += lv * static_cast<double>(n);
            std::size_t C = logits.dim(1);
            for (std::size_t b = 0; b < n; ++b) {
                const T* row = logits.data().data() + b * C;
                std::size_t am = std::max_element(row, row + C) - row;
                if (static_cast<int>(am) == y[b]) ++correct;
            }
        }
        auto [test_loss, test_acc] =
            evaluate(model, test_data, 128, plan.resolution);
        (void)test_loss;
        MetricsLog::Row row;
        row.epoch = epoch;
        row.lr = last_lr;
        row.train_loss = loss_sum / static_cast<double>(train_data.size());
        row.train_acc =
            static_cast<double>(correct) / static_cast<double>(train_data.size());
        row.test_acc = test_acc;
        row.head_values = head_column_values(model);
        log.rows.push_back(std::move(row));
    }
    model.training = false;
}

// ---------------------------------------------------------------------------
// Reparametrization-timing experiment (train t1 epochs as CNN, transform,
// train t2 more). same_optimizer keeps the optimizer state and the single
// LR schedule across the surgery; otherwise a fresh fine-tuning plan starts
// after it.

template <typename T>
struct ExperimentResult {
    std::size_t t1 = 0, t2 = 0;
    bool same_optimizer = true;
    double final_train_acc = 0.0;
    double final_test_acc = 0.0;
    MetricsLog log;
    Model<T> model;
};

template <typename T>
ExperimentResult<T> schedule_experiment(const ModelConfig& config,
                                        const Dataset<T>& train_data,
                                        const Dataset<T>& test_data,
                                        std::size_t t1, std::size_t t2,
                                        bool same_optimizer,
                                        const TrainPlan& base_plan,
                                        const TrainPlan& finetune_plan) {
    check(same_optimizer ? t1 + t2 == base_plan.total_epochs
                         : (t1 <= base_plan.total_epochs),
          "schedule_experiment: t1 + t2 must match the budget");
    ExperimentResult<T> res;
    res.t1 = t1;
    res.t2 = t2;
    res.same_optimizer = same_optimizer;

    Model<T> model = build_cnn<T>(config, base_plan.d_r);
    OptState<T> opt;
    if (same_optimizer) {
        // One schedule over the whole budget; surgery happens mid-run.
        if (t1 > 0)
            train_epochs(model, train_data, test_data, base_plan, res.log, opt,
                         0, t1);
        if (t2 > 0) {
            auto [hybrid, rep] =
                transform_last_stage(model, InitMode::paper(), 0);
            (void)rep;
            model = std::move(hybrid);
            train_epochs(model, train_data, test_data, base_plan, res.log, opt,
                         t1, t2);
        }
    } else {
        TrainPlan pre = base_plan;
        pre.total_epochs = t1;
        pre.warmup_epochs = std::min(pre.warmup_epochs, t1);
        if (t1 > 0)
            train_epochs(model, train_data, test_data, pre, res.log, opt, 0,
                         t1);
        if (t2 > 0) {
            auto [hybrid, rep] =
                transform_last_stage(model, InitMode::paper(), 0);
            (void)rep;
            model = std::move(hybrid);
            TrainPlan ft = finetune_plan;
            ft.total_epochs = t2;
            ft.warmup_epochs = std::min(ft.warmup_epochs, t2);
            OptState<T> fresh;
            MetricsLog ft_log;
            train_epochs(model, train_data, test_data, ft, ft_log, fresh, 0,
                         t2);
            // merge, renumbering epochs after t1
            if (res.log.head_columns.empty())
                res.log.head_columns = ft_log.head_columns;
            for (auto row : ft_log.rows) {
                row.epoch += t1;
                res.log.rows.push_back(std::move(row));
            }
        }
    }
    if (!res.log.rows.empty()) {
        res.final_train_acc = res.log.rows.back().train_acc;
        res.final_test_acc = res.log.rows.back().test_acc;
    } else {
        auto [l, acc] = evaluate(model, test_data);
        (void)l;
        res.final_test_acc = acc;
    }
    res.model = std::move(model);
    return res;
}

// Appendix-A style sweep: clone the model, fine-tune under each max LR.
template <typename T>
std::vector<MetricsLog> lr_sweep(const Model<T>& model,
                                 const Dataset<T>& train_data,
                                 const Dataset<T>& test_data,
                                 const std::vector<double>& lrs,
                                 const TrainPlan& plan) {
    check(!lrs.empty(), "lr_sweep: need at least one learning rate");
    std::vector<MetricsLog> logs;
    for (double lr : lrs) {
        Model<T> clone = clone_model(model);
        TrainPlan p = plan;
        p.max_lr = lr;
        p.min_lr = lr / 100.0;
        OptState<T> opt;
        MetricsLog log;
        train_epochs(clone, train_data, test_data, p, log, opt);
        logs.push_back(std::move(log));
    }
    return logs;
}

}  // namespace tcnn
