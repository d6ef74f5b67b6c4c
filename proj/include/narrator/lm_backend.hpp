#pragma once

// Language-model service interface: generation, continuation log-probabilities,
// and fine-tune submission. Implementations: MockBackend, HttpBackend.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "narrator/errors.hpp"
#include "narrator/hashing.hpp"

namespace narrator {

/// Stand-in for log(0); keeps scores totally ordered and serializable.
inline constexpr double kZeroMassLogProb = -1e9;

struct GenerationRequest {
  std::string prompt;
  std::size_t max_tokens = 512;
  double temperature = 1.0;
  std::size_t n = 1;
  std::string model_ref;

  void validate() const {
    if (n < 1) throw PreconditionError("generation request needs n >= 1");
    if (max_tokens < 1) throw PreconditionError("generation request needs max_tokens >= 1");
    if (!(temperature >= 0.0)) throw PreconditionError("temperature must be non-negative");
  }

  nlohmann::json to_json() const {
    return {{"prompt", prompt}, {"max_tokens", max_tokens}, {"temperature", temperature}, {"n", n}, {"model", model_ref}};
  }
};

/// log P(continuation | context). The continuation is pre-split into scoring units (whitespace words).
struct LogProbQuery {
  std::string context;
  std::vector<std::string> continuation;
  std::string model_ref;

  void validate() const {
    if (continuation.empty()) throw PreconditionError("log-prob query needs a non-empty continuation");
  }

  nlohmann::json to_json() const {
    return {{"context", context}, {"continuation", continuation}, {"model", model_ref}};
  }
};

struct BackendBudget {
  std::size_t max_concurrent = 1;
  std::size_t max_retries = 3;
  std::vector<std::chrono::milliseconds> retry_backoff{std::chrono::milliseconds(500), std::chrono::milliseconds(2000),
                                                       std::chrono::milliseconds(8000)};
  std::chrono::milliseconds request_timeout{60000};

  void validate() const {
    if (max_concurrent < 1) throw PreconditionError("max_concurrent must be >= 1");
  }

  std::chrono::milliseconds backoff(std::size_t attempt) const {
    if (retry_backoff.empty()) return std::chrono::milliseconds(0);
    return retry_backoff[std::min(attempt, retry_backoff.size() - 1)];
  }
};

/// Newline-delimited JSON audit trail shared by backends and the iteration loop.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  }

  void append(const nlohmann::json& entry) {
    const std::string line = entry.dump() + "\n";
    std::lock_guard lock(mu_);
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app | std::ios::binary);
      out << line;
    }
    if (keep_in_memory_) lines_.push_back(entry);
  }

  void keep_in_memory(bool on) {
    std::lock_guard lock(mu_);
    keep_in_memory_ = on;
  }

  std::vector<nlohmann::json> lines() const {
    std::lock_guard lock(mu_);
    return lines_;
  }

  const std::filesystem::path& path() const noexcept { return path_; }

  /// Reads back a log file written by append().
  static std::vector<nlohmann::json> read(const std::filesystem::path& path) {
    std::vector<nlohmann::json> out;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    }
    return out;
  }

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  bool keep_in_memory_ = false;
  std::vector<nlohmann::json> lines_;
};

/// Content-derived request ids. Identical requests get an occurrence suffix,
/// so retries of one logical request share an id while repeats do not.
class RequestIds {
 public:
  std::string next(std::string_view endpoint, const nlohmann::json& body) {
    const std::string base = short_hash(std::string(endpoint) + "\n" + body.dump());
    std::lock_guard lock(mu_);
    return base + "-" + std::to_string(++seen_[base]);
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::size_t> seen_;
};

class LanguageModelBackend {
 public:
  virtual ~LanguageModelBackend() = default;

  /// Exactly `req.n` completions.
  virtual std::vector<std::string> generate(const GenerationRequest& req) = 0;

  /// Natural-log probability of each continuation unit given the context and
  /// the preceding units. Zero mass is reported as kZeroMassLogProb.
  virtual std::vector<double> token_log_probs(const LogProbQuery& query) = 0;

  /// Fine-tunes `base_model` on a chat fine-tune file and returns the new model id.
  virtual std::string submit_finetune(const std::filesystem::path& dataset, const std::string& base_model) = 0;

  /// log P(Y | X) as the sum of per-unit conditionals. Any zero-mass unit
  /// makes the whole continuation kZeroMassLogProb.
  double log_prob(const LogProbQuery& query) {
    query.validate();
    const auto per_token = token_log_probs(query);
    if (per_token.size() != query.continuation.size()) {
      throw TransportError("backend returned " + std::to_string(per_token.size()) + " log-probs for " +
                           std::to_string(query.continuation.size()) + " continuation units");
    }
    double total = 0.0;
    for (double lp : per_token) {
      if (std::isnan(lp)) throw TransportError("backend returned NaN log-prob");
      if (lp <= kZeroMassLogProb) return kZeroMassLogProb;
      total += std::min(lp, 0.0);
    }
    return std::max(total, kZeroMassLogProb);
  }
};

}  // namespace narrator
