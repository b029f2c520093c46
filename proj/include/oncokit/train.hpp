#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "oncokit/autodiff.hpp"
#include "oncokit/optim.hpp"
#include "oncokit/params.hpp"

namespace oncokit {

/// Mini-batch AdamW settings shared by the network trainers.
struct TrainOptions {
    std::size_t epochs = 20;
    std::size_t batch = 1;
    double lr = 1e-3;
    double weight_decay = 1e-5;
    double period = 25.0;    // cosine warm-restart period in epochs
    double floor_lr = 1e-5;
    std::uint64_t seed = 0;  // shuffling order
    std::size_t workers = 0; // per-sample gradient workers; 0 = worker_count()

    void validate() const;
    OptimState make_state() const;
    nlohmann::json to_json() const;
    static TrainOptions from_json(const nlohmann::json& j);
};

/// Loss of sample `i` during `epoch`, recorded on `tape` through `bind`.
using SampleLoss =
    std::function<ad::Var(ad::Tape& tape, const ParamBinding& bind, std::size_t i, std::size_t epoch)>;

/// Called after every epoch with the epoch index and the mean sample loss.
using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

/// Trains `params` on samples 0..n-1 for options.epochs epochs starting at
/// `first_epoch` (for resumption). Each epoch visits the samples in a seeded
/// shuffled order; within a batch, per-sample gradients are computed in
/// parallel and summed in sample order before one AdamW step on their mean,
/// so results do not depend on the worker count. The learning rate follows the
/// cosine schedule per epoch. Returns the mean loss of each epoch run.
std::vector<double> train_samples(ParamStore& params, OptimState& state, std::size_t n, const SampleLoss& loss,
                                  const TrainOptions& options, std::size_t first_epoch = 0,
                                  const EpochCallback& on_epoch = {});

/// Visit order of epoch `epoch`: a permutation of 0..n-1 fixed by (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

}  // namespace oncokit
