#include "rcm/params.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "rcm/common.hpp"

namespace rcm {

void ParamSet::add(const std::string& name, std::vector<size_t> shape,
                   size_t fan_in, std::mt19937_64& rng) {
  if (index_.count(name))
    throw ContractError("duplicate parameter name " + name);
  Tensor t = Tensor::zeros(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data) v = dist(rng);
  index_[name] = entries_.size();
  entries_.push_back(
      Entry{name, std::move(t), Tensor::zeros(shape), Tensor::zeros(shape)});
}

void ParamSet::add_zeros(const std::string& name, std::vector<size_t> shape) {
  if (index_.count(name))
    throw ContractError("duplicate parameter name " + name);
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, Tensor::zeros(shape), Tensor::zeros(shape),
                           Tensor::zeros(shape)});
}

ParamSet::Entry& ParamSet::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return entries_[it->second];
}

const ParamSet::Entry& ParamSet::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return entries_[it->second];
}

bool ParamSet::has(const std::string& name) const {
  return index_.count(name) != 0;
}

size_t ParamSet::total_size() const {
  size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

std::unordered_map<std::string, Tape::NodeId> ParamSet::lease(
    Tape& tape) const {
  std::unordered_map<std::string, Tape::NodeId> ids;
  ids.reserve(entries_.size());
  for (const auto& e : entries_) ids[e.name] = tape.input(e.value);
  return ids;
}

void ParamSet::adam_apply(Entry& e, const Tensor& grad, const AdamConfig& cfg,
                          double bc1, double bc2) {
  if (!grad.same_shape(e.value))
    throw ContractError("gradient shape mismatch for " + e.name);
  for (size_t i = 0; i < grad.size(); ++i) {
    const double g = grad.data[i];
    if (!std::isfinite(g))
      throw NumericsError("non-finite gradient in " + e.name + " at index " +
                          std::to_string(i));
    e.m.data[i] = cfg.beta1 * e.m.data[i] + (1.0 - cfg.beta1) * g;
    e.v.data[i] = cfg.beta2 * e.v.data[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = e.m.data[i] / bc1;
    const double vhat = e.v.data[i] / bc2;
    e.value.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void ParamSet::adam_step(
    const Tape& tape,
    const std::unordered_map<std::string, Tape::NodeId>& ids,
    const AdamConfig& cfg) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
  for (auto& e : entries_) {
    auto it = ids.find(e.name);
    if (it == ids.end()) throw ContractError("no leased node for " + e.name);
    adam_apply(e, tape.grad(it->second), cfg, bc1, bc2);
  }
}

void ParamSet::adam_step_raw(
    const std::unordered_map<std::string, Tensor>& grads,
    const AdamConfig& cfg) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
  for (auto& e : entries_) {
    auto it = grads.find(e.name);
    if (it == grads.end()) throw ContractError("no gradient for " + e.name);
    adam_apply(e, it->second, cfg, bc1, bc2);
  }
}

void write_params(std::ostream& os, const ParamSet& params,
                  const std::string& prefix) {
  for (const auto& e : params.entries()) {
    os << prefix << e.name << " shape ";
    for (size_t i = 0; i < e.value.shape.size(); ++i) {
      if (i) os << ',';
      os << e.value.shape[i];
    }
    os << " values";
    for (double v : e.value.data) os << ' ' << format_double(v);
    os << '\n';
  }
}

void read_params(std::istream& is, ParamSet& params,
                 const std::string& prefix) {
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::istringstream ls(line);
    std::string name, kw;
    ls >> name >> kw;
    const std::string where = "checkpoint line " + std::to_string(lineno);
    if (kw != "shape") throw ParseError(where + ": expected 'shape'");
    if (!prefix.empty()) {
      if (name.rfind(prefix, 0) != 0)
        throw ParseError(where + ": name missing prefix " + prefix);
      name = name.substr(prefix.size());
    }
    std::string dims;
    ls >> dims;
    std::vector<size_t> shape;
    for (const auto& d : split(dims, ','))
      shape.push_back(static_cast<size_t>(parse_int(d, where)));
    ls >> kw;
    if (kw != "values") throw ParseError(where + ": expected 'values'");
    Tensor t = Tensor::zeros(shape);
    for (size_t i = 0; i < t.size(); ++i) {
      std::string v;
      if (!(ls >> v)) throw ParseError(where + ": too few values for " + name);
      t.data[i] = parse_double(v, where);
    }
    std::string extra;
    if (ls >> extra) throw ParseError(where + ": too many values for " + name);
    params.add_zeros(name, shape);
    params.entry(name).value = std::move(t);
  }
}

void save_params_file(const std::string& path, const ParamSet& params) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path);
  write_params(os, params);
}

ParamSet load_params_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot read " + path);
  ParamSet p;
  read_params(is, p);
  return p;
}

}  // namespace rcm
