#include "oncokit/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <random>

#include "oncokit/error.hpp"
#include "oncokit/parallel.hpp"

namespace oncokit {

void TrainOptions::validate() const {
    if (batch == 0) throw ConfigError("train: batch must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
    if (!(period > 0.0)) throw ConfigError("train: schedule period must be positive");
    if (!(floor_lr >= 0.0) || floor_lr > lr) throw ConfigError("train: floor_lr must lie in [0, lr]");
}

OptimState TrainOptions::make_state() const {
    OptimState s;
    s.lr = lr;
    s.weight_decay = weight_decay;
    s.schedule = CosineSchedule{lr, floor_lr, period};
    return s;
}

nlohmann::json TrainOptions::to_json() const {
    return {{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"weight_decay", weight_decay},
            {"period", period}, {"floor_lr", floor_lr}, {"seed", seed}};
}

TrainOptions TrainOptions::from_json(const nlohmann::json& j) {
    TrainOptions o;
    o.epochs = j.value("epochs", o.epochs);
    o.batch = j.value("batch", o.batch);
    o.lr = j.value("lr", o.lr);
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.period = j.value("period", o.period);
    o.floor_lr = j.value("floor_lr", o.floor_lr);
    o.seed = j.value("seed", o.seed);
    return o;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x7261696eu};
    std::mt19937_64 rng(seq);
    // Explicit Fisher-Yates: std::shuffle's sequence is implementation-defined.
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

std::vector<double> train_samples(ParamStore& params, OptimState& state, std::size_t n, const SampleLoss& loss,
                                  const TrainOptions& options, std::size_t first_epoch, const EpochCallback& on_epoch) {
    options.validate();
    if (n == 0) throw ContractError("train: no samples");
    struct SampleResult {
        double loss = 0.0;
        std::map<std::string, Tensor> grads;
    };
    std::vector<double> history;
    for (std::size_t epoch = first_epoch; epoch < options.epochs; ++epoch) {
        state.lr = state.schedule(static_cast<double>(epoch));
        const auto order = epoch_order(n, options.seed, epoch);
        double total = 0.0;
        for (std::size_t start = 0; start < n; start += options.batch) {
            const std::size_t count = std::min(options.batch, n - start);
            std::vector<SampleResult> results(count);
            parallel_for(
                count,
                [&](std::size_t k) {
                    ad::Tape tape;
                    ParamBinding bind(tape, params);
                    ad::Var l = loss(tape, bind, order[start + k], epoch);
                    const double v = l.value()[0];
                    if (!std::isfinite(v))
                        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
                    tape.backward(l);
                    results[k].loss = v;
                    results[k].grads = bind.grads();
                },
                options.workers);
            std::map<std::string, Tensor> sum = std::move(results[0].grads);
            total += results[0].loss;
            for (std::size_t k = 1; k < count; ++k) {
                total += results[k].loss;
                for (auto& [name, g] : results[k].grads) {
                    auto it = sum.find(name);
                    if (it == sum.end()) {
                        sum.emplace(name, std::move(g));
                    } else {
                        const auto acc = it->second.data();
                        const auto src = g.data();
                        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
                    }
                }
            }
            if (count > 1)
                for (auto& [name, g] : sum)
                    for (auto& v : g.data()) v /= static_cast<double>(count);
            adamw_step(params, sum, state);
        }
        history.push_back(total / static_cast<double>(n));
        if (on_epoch) on_epoch(epoch, history.back());
    }
    return history;
}

}  // namespace oncokit
