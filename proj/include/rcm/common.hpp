#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rcm {

// Error classes surfaced by the CLI as machine-parsable one-liners
// ("error: <cls>: <message>").
class Error : public std::runtime_error {
 public:
  Error(std::string cls, const std::string& msg)
      : std::runtime_error(msg), cls_(std::move(cls)) {}
  const std::string& cls() const { return cls_; }

 private:
  std::string cls_;
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& msg) : Error("load", msg) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& msg) : Error("parse", msg) {}
};

// Destination not reachable from a source link. Signaled distinctly so
// callers can filter such OD pairs instead of aborting.
class UnreachableError : public Error {
 public:
  explicit UnreachableError(const std::string& msg)
      : Error("unreachable", msg) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error("contract", msg) {}
};

class NumericsError : public Error {
 public:
  explicit NumericsError(const std::string& msg) : Error("numerics", msg) {}
};

class SpecError : public Error {
 public:
  explicit SpecError(const std::string& msg) : Error("spec", msg) {}
};

class TrainAbort : public Error {
 public:
  explicit TrainAbort(const std::string& msg) : Error("train-abort", msg) {}
};

// All randomness flows from one root seed; sub-streams are derived with a
// splitmix64 hash so batching order cannot perturb the per-purpose streams.
uint64_t derive_seed(uint64_t root, uint64_t stream);
uint64_t derive_seed(uint64_t root, const std::string& purpose);

// Shortest decimal form that round-trips a double (up to 17 significant
// digits); used by every text artifact so reruns are byte-identical.
std::string format_double(double v);

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);

// Strict numeric parsing with location-tagged failures.
double parse_double(const std::string& s, const std::string& where);
int64_t parse_int(const std::string& s, const std::string& where);

}  // namespace rcm
