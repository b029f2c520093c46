#include "oncokit/params.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "binio.hpp"
#include "oncokit/error.hpp"

namespace oncokit {

namespace detail {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path + " for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path);
}

}  // namespace detail

Tensor& ParamStore::add(const std::string& name, Tensor init) {
    if (index_.contains(name)) throw ContractError("duplicate parameter name " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(init));
    return entries_.back().second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return entries_[it->second].second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return entries_[it->second].second;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
}

ParamBinding::ParamBinding(ad::Tape& tape, const ParamStore& store) : tape_(&tape) {
    for (const auto& [name, value] : store.entries()) {
        index_.emplace(name, vars_.size());
        vars_.emplace_back(name, tape.leaf(value, true));
    }
}

ParamBinding::ParamBinding(ad::Tape& tape, std::vector<std::pair<std::string, ad::Var>> vars)
    : tape_(&tape), vars_(std::move(vars)) {
    for (std::size_t i = 0; i < vars_.size(); ++i) {
        if (vars_[i].second.tape != &tape) throw ContractError("parameter " + vars_[i].first + " is on another tape");
        if (!index_.emplace(vars_[i].first, i).second) throw ContractError("duplicate parameter name " + vars_[i].first);
    }
}

ad::Var ParamBinding::operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("parameter " + name + " is not bound");
    return vars_[it->second].second;
}

std::map<std::string, Tensor> ParamBinding::grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : vars_) out.emplace(name, tape_->grad(v));
    return out;
}

Tensor trunc_normal(Shape shape, double std, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : t.data()) {
        double z;
        do z = nd(rng);
        while (std::abs(z) > 2.0);
        v = z * std;
    }
    return t;
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> ud(-bound, bound);
    for (auto& v : t.data()) v = ud(rng);
    return t;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const nlohmann::json& manifest) {
    detail::ByteWriter w;
    w.put_bytes("OKPT", 4);
    w.put<std::uint32_t>(1);
    const std::string m = manifest.dump();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.size()));
    w.put_bytes(m.data(), m.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(store.entries().size()));
    for (const auto& [name, t] : store.entries()) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.put_bytes(name.data(), name.size());
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
        for (double v : t.data()) w.put<float>(static_cast<float>(v));
    }
    detail::write_file(path.string(), w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path.string());
    detail::ByteReader r(bytes);
    if (r.get_string(4, "magic") != "OKPT") throw FormatError("bad checkpoint magic", 0);
    const auto version = r.get<std::uint32_t>("version");
    if (version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
    Checkpoint ck;
    const auto mlen = r.get<std::uint32_t>("manifest length");
    const std::size_t mpos = r.pos();
    try {
        ck.manifest = nlohmann::json::parse(r.get_string(mlen, "manifest"));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("manifest is not JSON: ") + e.what(), mpos);
    }
    const auto count = r.get<std::uint32_t>("parameter count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = r.get<std::uint32_t>("name length");
        std::string name = r.get_string(nlen, "name");
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank < 1 || rank > 5) throw FormatError("parameter " + name + " has invalid rank", r.pos() - 4);
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.get<std::uint32_t>("extent"));
        const std::size_t n = shape_numel(shape);
        if (n > r.remaining() / 4) throw FormatError("truncated payload of parameter " + name, r.pos());
        std::vector<double> data(n);
        for (auto& v : data) v = r.get<float>("payload");
        ck.params.add(name, Tensor(shape, std::move(data)));
    }
    return ck;
}

}  // namespace oncokit
