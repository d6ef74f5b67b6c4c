#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "narrator/finetune.hpp"
#include "narrator/hashing.hpp"
#include "narrator/lm_backend.hpp"
#include "narrator/parallel.hpp"

namespace narrator {

/// Natural-log probability of `token` after `context` followed by `prefix`.
/// Returning -inf (or anything <= kZeroMassLogProb) means zero mass.
using ConditionalFn =
    std::function<double(std::string_view context, std::span<const std::string> prefix, const std::string& token)>;
using GeneratorFn = std::function<std::vector<std::string>(const GenerationRequest&)>;
using FinetuneHook = std::function<void(const std::string& new_model, const std::string& base_model,
                                        const std::vector<FinetuneRecord>& records)>;

/// The text a causal LM would have seen before `token`: context, then each
/// prefix unit separated by one space. Scoring X++Y1 as a context therefore
/// matches scoring Y1 as a prefix.
inline std::string history_string(std::string_view context, std::span<const std::string> prefix) {
  std::string h(context);
  for (const auto& p : prefix) {
    h += ' ';
    h += p;
  }
  return h;
}

/// Log-prob resolution of the hashed mock. Values are multiples of 2^-20, so
/// sums of a few thousand of them are exact in double precision.
inline constexpr double kMockLogProbQuantum = 1.0 / 1048576.0;

/// Pseudo-random but pure conditional: -(1..8*2^20) * 2^-20, derived from
/// (seed, history, token).
inline ConditionalFn hashed_conditional(std::uint64_t seed) {
  return [seed](std::string_view context, std::span<const std::string> prefix, const std::string& token) {
    const std::string key = std::to_string(seed) + "\x1f" + history_string(context, prefix) + "\x1f" + token;
    const std::uint64_t k = hash64(key) % (8ull << 20);
    return -static_cast<double>(k + 1) * kMockLogProbQuantum;
  };
}

struct MockOptions {
  std::uint64_t seed = 0;
  /// Exact-prompt lookup for generate(); consulted before `generator`.
  std::map<std::string, std::vector<std::string>> table;
  GeneratorFn generator;
  /// Defaults to hashed_conditional(seed).
  ConditionalFn conditional;
  FinetuneHook on_finetune;
  bool supports_logprobs = true;
  BackendBudget budget;
  std::shared_ptr<AuditLog> audit;
};

/// Deterministic in-process backend: a pure function of (options, request).
class MockBackend : public LanguageModelBackend {
 public:
  explicit MockBackend(MockOptions options = {})
      : options_(std::move(options)), limiter_(options_.budget.max_concurrent) {
    options_.budget.validate();
    if (!options_.conditional) options_.conditional = hashed_conditional(options_.seed);
  }

  std::vector<std::string> generate(const GenerationRequest& req) override {
    req.validate();
    auto permit = limiter_.acquire();
    const auto body = req.to_json();
    const std::string id = ids_.next("mock/generate", body);
    std::vector<std::string> out;
    if (auto it = options_.table.find(req.prompt); it != options_.table.end()) {
      if (it->second.size() < req.n) {
        refuse(id, "mock/generate", body,
               "mock table holds " + std::to_string(it->second.size()) + " completions for this prompt; " +
                   std::to_string(req.n) + " requested");
      }
      out.assign(it->second.begin(), it->second.begin() + static_cast<std::ptrdiff_t>(req.n));
    } else if (options_.generator) {
      out = options_.generator(req);
      if (out.size() != req.n) {
        refuse(id, "mock/generate", body,
               "mock generator produced " + std::to_string(out.size()) + " of " + std::to_string(req.n) + " completions");
      }
    } else {
      refuse(id, "mock/generate", body, "mock has no completion for this prompt");
    }
    log(id, "mock/generate", body, {{"completions", out}});
    return out;
  }

  std::vector<double> token_log_probs(const LogProbQuery& query) override {
    query.validate();
    auto permit = limiter_.acquire();
    const auto body = query.to_json();
    const std::string id = ids_.next("mock/logprobs", body);
    if (!options_.supports_logprobs) throw UnsupportedError("mock backend configured without token log-probs");
    std::vector<double> out;
    out.reserve(query.continuation.size());
    const std::span<const std::string> all(query.continuation);
    for (std::size_t i = 0; i < all.size(); ++i) {
      double lp = options_.conditional(query.context, all.first(i), all[i]);
      if (std::isnan(lp)) throw TransportError("mock conditional returned NaN");
      if (lp <= kZeroMassLogProb) lp = kZeroMassLogProb;
      out.push_back(lp);
    }
    log(id, "mock/logprobs", body, {{"token_logprobs", out}});
    return out;
  }

  /// New id is "<base>@ft<i>" where i is one more than the number of
  /// fine-tunes already in the base id's lineage.
  std::string submit_finetune(const std::filesystem::path& dataset, const std::string& base_model) override {
    const auto records = read_finetune_file(dataset);
    auto permit = limiter_.acquire();
    std::size_t depth = 0;
    for (auto pos = base_model.find("@ft"); pos != std::string::npos; pos = base_model.find("@ft", pos + 3)) ++depth;
    const std::string model = base_model + "@ft" + std::to_string(depth + 1);
    const nlohmann::json body = {{"training_file", dataset.filename().string()}, {"model", base_model},
                                 {"records", records.size()}};
    const std::string id = ids_.next("mock/fine_tuning", body);
    if (options_.on_finetune) options_.on_finetune(model, base_model, records);
    log(id, "mock/fine_tuning", body, {{"fine_tuned_model", model}});
    return model;
  }

  const MockOptions& options() const noexcept { return options_; }

 private:
  void log(const std::string& id, std::string_view endpoint, const nlohmann::json& req, const nlohmann::json& resp) {
    if (!options_.audit) return;
    options_.audit->append(
        {{"request_id", id}, {"endpoint", endpoint}, {"attempt", 1}, {"request", req}, {"response", resp}});
  }

  [[noreturn]] void refuse(const std::string& id, std::string_view endpoint, const nlohmann::json& req,
                           const std::string& why) {
    log(id, endpoint, req, {{"error", why}});
    throw BackendRefusal(why);
  }

  MockOptions options_;
  ConcurrencyLimiter limiter_;
  RequestIds ids_;
};

}  // namespace narrator
