#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "oncokit/autodiff.hpp"
#include "oncokit/tensor.hpp"

namespace oncokit {

/// Named learnable tensors in insertion order.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor init);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.contains(name); }

    const std::vector<std::pair<std::string, Tensor>>& entries() const noexcept { return entries_; }
    std::vector<std::pair<std::string, Tensor>>& entries() noexcept { return entries_; }
    std::size_t scalar_count() const;

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// ParamStore values recorded as grad-requiring leaves of one tape.
class ParamBinding {
public:
    ParamBinding(ad::Tape& tape, const ParamStore& store);
    /// Binds already-recorded leaves (e.g. inputs of a finite-difference check).
    ParamBinding(ad::Tape& tape, std::vector<std::pair<std::string, ad::Var>> vars);

    ad::Var operator[](const std::string& name) const;
    ad::Tape& tape() const noexcept { return *tape_; }

    /// name -> d(loss)/d(param) after tape.backward().
    std::map<std::string, Tensor> grads() const;

private:
    ad::Tape* tape_;
    std::vector<std::pair<std::string, ad::Var>> vars_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Normal(0, std) truncated to two standard deviations.
Tensor trunc_normal(Shape shape, double std, std::mt19937_64& rng);

/// Kaiming-style uniform init for a layer with `fan_in` inputs.
Tensor fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

// Weight checkpoint:
//   magic "OKPT", u32 version=1, u32 manifest length, manifest JSON (UTF-8),
//   u32 parameter count, then per parameter:
//   u32 name length, name bytes, u32 rank, u32 x rank extents, f32 x numel payload.
// All integers and floats little-endian.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const nlohmann::json& manifest);

struct Checkpoint {
    ParamStore params;
    nlohmann::json manifest;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace oncokit
