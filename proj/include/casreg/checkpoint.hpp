#pragma once

#include <map>
#include <string>
#include <vector>

#include "casreg/io.hpp"
#include "casreg/train.hpp"

namespace casreg {

// Checkpoint container: magic "RCK1", u32 record count, then per-record:
// u32 name length, name bytes, u32 rank, rank u32 dims, f32 payload.
// Model tensors come first in registration order; optimizer state follows
// under reserved "_adam." names plus "_step" for the training step counter.

namespace ckpt_detail {

struct Record {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

inline void write_record(std::ofstream& os, const std::string& name,
                         const Shape& shape, const float* data) {
  detail::write_u32(os, std::uint32_t(name.size()));
  detail::write_bytes(os, name.data(), name.size());
  detail::write_u32(os, std::uint32_t(shape.rank));
  for (int i = 0; i < shape.rank; ++i)
    detail::write_u32(os, std::uint32_t(shape.dim[std::size_t(i)]));
  detail::write_bytes(os, data, sizeof(float) * std::size_t(shape.size()));
}

inline Record read_record(std::ifstream& is, const std::string& path) {
  Record r;
  std::uint32_t name_len = detail::read_u32(is, path);
  if (name_len > 4096) throw FormatError(path + ": implausible record name");
  r.name.resize(name_len);
  detail::read_exact(is, r.name.data(), name_len, path);
  std::uint32_t rank = detail::read_u32(is, path);
  if (rank < 1 || rank > 5)
    throw FormatError(path + ": record '" + r.name + "' has rank " +
                      std::to_string(rank));
  r.shape.rank = int(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t d = detail::read_u32(is, path);
    if (d == 0)
      throw FormatError(path + ": record '" + r.name + "' has zero dim");
    r.shape.dim[i] = int(d);
  }
  r.data.resize(std::size_t(r.shape.size()));
  detail::read_exact(is, r.data.data(), sizeof(float) * r.data.size(), path);
  return r;
}

}  // namespace ckpt_detail

namespace ckpt_detail {

inline void save_impl(CascadeModel& model, const AdamState* state,
                      std::int64_t step, const std::string& path) {
  auto tensors = model_tensors(model);
  std::uint32_t count = std::uint32_t(tensors.size());
  if (state) count = std::uint32_t(3 * tensors.size() + 3);
  auto os = detail::open_out(path);
  detail::write_bytes(os, "RCK1", 4);
  detail::write_u32(os, count);
  for (auto& [name, t] : tensors)
    ckpt_detail::write_record(os, name, t->shape, t->value.data());
  if (state) {
    if (state->m.size() != tensors.size())
      throw ContractError("save_checkpoint: optimizer state misaligned");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      Shape s = tensors[i].second->shape;
      ckpt_detail::write_record(os, "_adam.m." + tensors[i].first, s,
                                state->m[i].data());
      ckpt_detail::write_record(os, "_adam.v." + tensors[i].first, s,
                                state->v[i].data());
    }
    float t_val = float(state->t);
    float skip_val = float(state->skip_streak);
    float step_val = float(step);
    ckpt_detail::write_record(os, "_adam.t", Shape::vec(1), &t_val);
    ckpt_detail::write_record(os, "_adam.skip", Shape::vec(1), &skip_val);
    ckpt_detail::write_record(os, "_step", Shape::vec(1), &step_val);
  }
  os.close();
  if (!os) throw IoError("failed to finalize " + path);
}

}  // namespace ckpt_detail

/// Writes model parameters only; such a checkpoint loads for inference but
/// cannot resume training.
inline void save_checkpoint(CascadeModel& model, const std::string& path) {
  ckpt_detail::save_impl(model, nullptr, 0, path);
}

/// Writes model parameters plus the full optimizer state and step counter,
/// so training resumes exactly.
inline void save_checkpoint(CascadeModel& model, const AdamState& state,
                            std::int64_t step, const std::string& path) {
  ckpt_detail::save_impl(model, &state, step, path);
}

struct CheckpointInfo {
  std::int64_t step = 0;
  bool has_optimizer = false;
};

/// Loads parameters into an already-constructed model (architecture comes
/// from config, not the file). Mismatches are reported by parameter name.
/// With `state` non-null the optimizer records are required.
inline CheckpointInfo load_checkpoint(const std::string& path,
                                      CascadeModel& model,
                                      AdamState* state = nullptr) {
  auto is = detail::open_in(path);
  char magic[4];
  detail::read_exact(is, magic, 4, path);
  if (std::memcmp(magic, "RCK1", 4) != 0)
    throw FormatError(path + ": bad magic, not an RCK1 checkpoint");
  std::uint32_t count = detail::read_u32(is, path);
  std::map<std::string, ckpt_detail::Record> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    ckpt_detail::Record r = ckpt_detail::read_record(is, path);
    if (!records.emplace(r.name, std::move(r)).second)
      throw FormatError(path + ": duplicate record '" + r.name + "'");
  }
  if (is.peek() != std::ifstream::traits_type::eof())
    throw FormatError(path + ": trailing bytes after records");

  auto take = [&](const std::string& name, const Shape& want,
                  const char* what) -> ckpt_detail::Record {
    auto it = records.find(name);
    if (it == records.end())
      throw FormatError(path + ": missing " + what + " record '" + name + "'");
    ckpt_detail::Record r = std::move(it->second);
    records.erase(it);
    if (!(r.shape == want))
      throw ShapeError(path + ": parameter '" + name + "' has shape " +
                       to_string(r.shape) + ", model expects " +
                       to_string(want));
    return r;
  };

  auto tensors = model_tensors(model);
  for (auto& [name, t] : tensors) {
    ckpt_detail::Record r = take(name, t->shape, "parameter");
    for (std::size_t k = 0; k < r.data.size(); ++k)
      t->value[std::int64_t(k)] = r.data[k];
    if (!t->value.allFinite())
      throw DataError(path + ": non-finite values in '" + name + "'");
  }

  CheckpointInfo info;
  info.has_optimizer = records.count("_adam.t") > 0;
  if (state) {
    state->init_for(model);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      Shape s = tensors[i].second->shape;
      auto rm = take("_adam.m." + tensors[i].first, s, "optimizer");
      auto rv = take("_adam.v." + tensors[i].first, s, "optimizer");
      for (std::size_t k = 0; k < rm.data.size(); ++k) {
        state->m[i][std::int64_t(k)] = rm.data[k];
        state->v[i][std::int64_t(k)] = rv.data[k];
      }
    }
    state->t = std::int64_t(take("_adam.t", Shape::vec(1), "optimizer").data[0]);
    state->skip_streak =
        int(take("_adam.skip", Shape::vec(1), "optimizer").data[0]);
    info.step = std::int64_t(take("_step", Shape::vec(1), "optimizer").data[0]);
  } else {
    for (auto it = records.begin(); it != records.end();) {
      const std::string& n = it->first;
      if (n.rfind("_adam.", 0) == 0 || n == "_step") {
        if (n == "_step") info.step = std::int64_t(it->second.data[0]);
        it = records.erase(it);
      } else {
        ++it;
      }
    }
  }
  if (!records.empty())
    throw FormatError(path + ": unexpected record '" +
                      records.begin()->first + "'");
  return info;
}

}  // namespace casreg
