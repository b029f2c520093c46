#include "oncokit/volume.hpp"

#include <limits>

#include "binio.hpp"
#include "oncokit/error.hpp"

namespace oncokit {

std::string modality_name(Modality m) {
    switch (m) {
        case Modality::CT: return "CT";
        case Modality::PET: return "PET";
        case Modality::MASK: return "MASK";
        case Modality::MR: return "MR";
    }
    return "?";
}

Volume::Volume(Extents3 shape, Spacing3 spacing, Modality modality, float fill)
    : shape_(shape), spacing_(spacing), modality_(modality) {
    for (auto e : shape_)
        if (e == 0) throw ShapeError("volume extents must be >= 1");
    data_.assign(shape_[0] * shape_[1] * shape_[2], fill);
    validate();
}

Volume::Volume(Extents3 shape, Spacing3 spacing, Modality modality, std::vector<float> data)
    : shape_(shape), spacing_(spacing), modality_(modality), data_(std::move(data)) {
    for (auto e : shape_)
        if (e == 0) throw ShapeError("volume extents must be >= 1");
    if (data_.size() != shape_[0] * shape_[1] * shape_[2])
        throw ShapeError("volume data length " + std::to_string(data_.size()) + " does not match extents");
    validate();
}

void Volume::validate() const {
    for (float s : spacing_)
        if (!(s > 0.0f)) throw ContractError("volume spacing must be positive");
    if (modality_ == Modality::MASK)
        for (float v : data_)
            if (v != 0.0f && v != 1.0f) throw ContractError("MASK volume holds non-binary voxel " + std::to_string(v));
}

void Volume::set_spacing(Spacing3 s) {
    spacing_ = s;
    validate();
}

void Volume::set_modality(Modality m) {
    modality_ = m;
    validate();
}

Tensor to_tensor(std::span<const Volume* const> channels) {
    if (channels.empty()) throw ContractError("to_tensor: no channels");
    const auto shape = channels[0]->shape();
    std::vector<double> data;
    data.reserve(channels.size() * channels[0]->size());
    for (const Volume* v : channels) {
        if (v->shape() != shape) throw ShapeError("to_tensor: channel extents differ");
        data.insert(data.end(), v->data().begin(), v->data().end());
    }
    return Tensor({channels.size(), shape[0], shape[1], shape[2]}, std::move(data));
}

Tensor to_tensor(const Volume& v) {
    const Volume* p = &v;
    return to_tensor(std::span<const Volume* const>(&p, 1));
}

Volume from_tensor(const Tensor& t, std::size_t channel, Spacing3 spacing, Modality modality) {
    if (t.rank() != 4 || channel >= t.dim(0)) throw ShapeError("from_tensor: expected [C, H, W, D], got " + shape_str(t.shape()));
    const std::size_t n = t.dim(1) * t.dim(2) * t.dim(3);
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<float>(t[channel * n + i]);
    return Volume({t.dim(1), t.dim(2), t.dim(3)}, spacing, modality, std::move(data));
}

std::vector<unsigned char> encode_volume(const Volume& v) {
    detail::ByteWriter w;
    w.put_bytes("MVOL", 4);
    w.put<std::uint32_t>(1);
    for (auto e : v.shape()) {
        if (e > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("volume extent exceeds u32");
        w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    }
    for (float s : v.spacing()) w.put<float>(s);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(v.modality()));
    const unsigned char reserved[3] = {static_cast<unsigned char>(v.normalized() ? 1 : 0), 0, 0};
    w.put_bytes(reserved, 3);
    for (float x : v.data()) w.put<float>(x);
    return w.bytes();
}

Volume decode_volume(const std::vector<unsigned char>& bytes) {
    detail::ByteReader r(bytes);
    if (bytes.size() < 4 || r.get_string(4, "magic") != "MVOL") throw FormatError("bad magic, expected MVOL", 0);
    const auto version = r.get<std::uint32_t>("version");
    if (version != 1) throw FormatError("unsupported MVOL version " + std::to_string(version), 4);
    Extents3 shape{};
    std::size_t total = 1;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t off = r.pos();
        shape[i] = r.get<std::uint32_t>("extents");
        if (shape[i] == 0) throw FormatError("zero extent", off);
        if (total > std::numeric_limits<std::size_t>::max() / 4 / shape[i]) throw FormatError("extent overflow", off);
        total *= shape[i];
    }
    Spacing3 spacing{};
    for (auto& s : spacing) {
        const std::size_t off = r.pos();
        s = r.get<float>("spacing");
        if (!(s > 0.0f)) throw FormatError("non-positive spacing", off);
    }
    const std::size_t moff = r.pos();
    const auto code = r.get<std::uint8_t>("modality");
    if (code > 3) throw FormatError("unknown modality code " + std::to_string(code), moff);
    const auto flags = r.get<std::uint8_t>("reserved bytes");
    r.skip(2, "reserved bytes");
    const std::size_t payload_off = r.pos();
    if (r.remaining() != total * 4)
        throw FormatError("payload holds " + std::to_string(r.remaining()) + " bytes, header declares " +
                              std::to_string(total * 4) + " (truncated or trailing data)",
                          payload_off);
    std::vector<float> data(total);
    for (auto& x : data) x = r.get<float>("payload");
    const auto modality = static_cast<Modality>(code);
    if (modality == Modality::MASK)
        for (std::size_t i = 0; i < total; ++i)
            if (data[i] != 0.0f && data[i] != 1.0f) throw FormatError("non-binary MASK voxel", payload_off + 4 * i);
    Volume v(shape, spacing, modality, std::move(data));
    v.set_normalized((flags & 1u) != 0);
    return v;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
    detail::write_file(path.string(), encode_volume(v));
}

Volume read_volume(const std::filesystem::path& path) { return decode_volume(detail::read_file(path.string())); }

}  // namespace oncokit
