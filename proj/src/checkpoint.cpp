// SPDX-License-Identifier: Apache-2.0
#include "tspm/checkpoint.hpp"

#include <map>
#include <set>

#include "tspm/binary_io.hpp"
#include "tspm/error.hpp"

namespace tspm {

namespace {
constexpr std::string_view kMagic = "TSPMCKPT";
constexpr std::uint32_t kMaxRank = 8;
}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<TensorRecord>& records) {
  ByteWriter w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  for (const auto& [name, t] : records) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(t.data());
  }
  return w.buffer();
}

std::vector<TensorRecord> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kMagic, "checkpoint");
  const std::uint64_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  std::vector<TensorRecord> out;
  std::set<std::string> seen;
  while (!r.at_end()) {
    const std::uint64_t record_at = r.offset();
    const std::uint32_t name_len = r.u32();
    if (name_len == 0) throw FormatError("empty record name", record_at);
    std::string name = r.string(name_len);
    if (!seen.insert(name).second) throw FormatError("duplicate record '" + name + "'", record_at);
    const std::uint64_t rank_at = r.offset();
    const std::uint32_t rank = r.u32();
    if (rank > kMaxRank) throw FormatError("record rank " + std::to_string(rank) + " exceeds limit", rank_at);
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint64_t dim_at = r.offset();
      const std::uint32_t d = r.u32();
      if (d == 0) throw FormatError("zero extent in record '" + name + "'", dim_at);
      count *= d;
      // Any count beyond the bytes left is truncation; checking per dim keeps
      // the product from overflowing.
      if (count > r.remaining() / 4 + 1) {
        throw FormatError("record '" + name + "' claims more data than the file holds", dim_at);
      }
      shape.push_back(d);
    }
    std::vector<float> data = r.f32s(count);
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<TensorRecord>& records) {
  write_file_bytes(path, encode_checkpoint(records));
}

std::vector<TensorRecord> read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint(bytes);
}

std::vector<TensorRecord> store_records(const ParameterStore& store) {
  std::vector<TensorRecord> out;
  for (const auto& [name, t] : store.params()) out.emplace_back(name, t.detach());
  for (const auto& [name, mom] : store.moments()) {
    const Shape& shape = store.get(name).shape();
    out.emplace_back("optim/m/" + name, Tensor(shape, mom.m));
    out.emplace_back("optim/v/" + name, Tensor(shape, mom.v));
  }
  out.emplace_back("optim/step", Tensor::scalar(static_cast<float>(store.step())));
  return out;
}

void restore_store(const std::vector<TensorRecord>& records, ParameterStore& store) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : records) by_name[name] = &t;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("checkpoint is missing '" + name + "'");
    if (it->second->shape() != shape) {
      throw ContractError("checkpoint record '" + name + "' has shape " + shape_to_string(it->second->shape()) +
                          ", expected " + shape_to_string(shape));
    }
    return *it->second;
  };
  for (const auto& [name, param] : store.params()) {
    Tensor p = param;
    const Tensor& src = fetch(name, p.shape());
    std::copy(src.data().begin(), src.data().end(), p.mutable_data().begin());
    p.clear_grad();
    auto& mom = store.moments().at(name);
    const Tensor& m = fetch("optim/m/" + name, p.shape());
    const Tensor& v = fetch("optim/v/" + name, p.shape());
    mom.m.assign(m.data().begin(), m.data().end());
    mom.v.assign(v.data().begin(), v.data().end());
  }
  store.set_step(static_cast<std::uint64_t>(fetch("optim/step", Shape{}).item()));
}

}  // namespace tspm
