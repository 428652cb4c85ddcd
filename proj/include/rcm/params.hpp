#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "rcm/tape.hpp"
#include "rcm/tensor.hpp"

namespace rcm {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Named parameter arrays plus the optimizer moments that ride along with
// them. Shapes are fixed after creation.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor m;  // first moment
    Tensor v;  // second moment
  };

  // fan_in scales the init range to U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  void add(const std::string& name, std::vector<size_t> shape, size_t fan_in,
           std::mt19937_64& rng);
  void add_zeros(const std::string& name, std::vector<size_t> shape);

  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
  bool has(const std::string& name) const;
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  int64_t step_count() const { return step_; }
  size_t total_size() const;

  // Leases every entry into the tape; returns name -> node id.
  std::unordered_map<std::string, Tape::NodeId> lease(Tape& tape) const;

  // One bias-corrected Adam update from the gradients accumulated in the
  // leased tape nodes. Non-finite gradients are rejected with the offending
  // parameter named.
  void adam_step(const Tape& tape,
                 const std::unordered_map<std::string, Tape::NodeId>& ids,
                 const AdamConfig& cfg);
  // Same update from raw gradient tensors keyed by name.
  void adam_step_raw(const std::unordered_map<std::string, Tensor>& grads,
                     const AdamConfig& cfg);

 private:
  void adam_apply(Entry& e, const Tensor& grad, const AdamConfig& cfg,
                  double bc1, double bc2);
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
  int64_t step_ = 0;
};

// Flat text persistence: one record per array,
//   <name> shape d0,d1 values v0 v1 ...
// with doubles printed so they round-trip exactly.
void write_params(std::ostream& os, const ParamSet& params,
                  const std::string& prefix = "");
void read_params(std::istream& is, ParamSet& params,
                 const std::string& prefix = "");

void save_params_file(const std::string& path, const ParamSet& params);
ParamSet load_params_file(const std::string& path);

}  // namespace rcm
