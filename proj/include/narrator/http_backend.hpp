#pragma once

// OpenAI-compatible HTTP backend.
//   generation:  POST /v1/chat/completions
//   scoring:     POST /v1/completions with echo + logprobs
//   fine-tuning: POST /v1/files, POST /v1/fine_tuning/jobs, GET /v1/fine_tuning/jobs/{id}

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "httplib.h"
#include "narrator/errors.hpp"
#include "narrator/finetune.hpp"
#include "narrator/io.hpp"
#include "narrator/lm_backend.hpp"
#include "narrator/parallel.hpp"
#include "narrator/text.hpp"

namespace narrator {

inline constexpr const char* kApiKeyEnv = "NARRATOR_API_KEY";
inline constexpr const char* kApiBaseEnv = "NARRATOR_API_BASE";
inline constexpr const char* kDefaultApiBase = "https://api.openai.com";

struct HttpOptions {
  /// scheme://host[:port][/prefix]; endpoint paths ("/v1/...") are appended to the prefix.
  std::string base_url = kDefaultApiBase;
  std::string api_key;
  BackendBudget budget;
  std::shared_ptr<AuditLog> audit;
  std::chrono::milliseconds poll_interval{std::chrono::seconds(10)};
  std::chrono::milliseconds job_timeout{std::chrono::hours(24)};
  int finetune_epochs = 3;

  /// Fills base_url / api_key from NARRATOR_API_BASE / NARRATOR_API_KEY when set.
  HttpOptions& apply_environment() {
    if (const char* base = std::getenv(kApiBaseEnv); base && *base) base_url = base;
    if (const char* key = std::getenv(kApiKeyEnv); key && *key) api_key = key;
    return *this;
  }
};

namespace detail {

struct SplitUrl {
  std::string origin;
  std::string prefix;
};

inline SplitUrl split_base_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw PreconditionError("base URL needs a scheme: " + url);
  const auto path = url.find('/', scheme + 3);
  SplitUrl out;
  out.origin = url.substr(0, path);
  if (path != std::string::npos) out.prefix = url.substr(path);
  while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  return out;
}

inline std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) {
    if ((c & 0xC0) != 0x80) ++n;
  }
  return n;
}

}  // namespace detail

class HttpBackend : public LanguageModelBackend {
 public:
  explicit HttpBackend(HttpOptions options)
      : options_(std::move(options)), url_(detail::split_base_url(options_.base_url)),
        limiter_(options_.budget.max_concurrent) {
    options_.budget.validate();
  }

  std::vector<std::string> generate(const GenerationRequest& req) override {
    req.validate();
    const nlohmann::json body = {{"model", req.model_ref},
                                 {"messages", nlohmann::json::array({{{"role", "user"}, {"content", req.prompt}}})},
                                 {"max_tokens", req.max_tokens},
                                 {"temperature", req.temperature},
                                 {"n", req.n}};
    const auto resp = post_json("/v1/chat/completions", body);
    const auto& choices = resp.value("choices", nlohmann::json::array());
    std::vector<std::pair<std::size_t, std::string>> indexed;
    for (const auto& c : choices) {
      const auto& msg = c.value("message", nlohmann::json::object());
      if (!msg.contains("content") || !msg.at("content").is_string()) continue;
      indexed.emplace_back(c.value("index", indexed.size()), msg.at("content").get<std::string>());
    }
    if (indexed.size() != req.n) {
      throw BackendRefusal("backend returned " + std::to_string(indexed.size()) + " of " + std::to_string(req.n) +
                           " completions");
    }
    std::stable_sort(indexed.begin(), indexed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::string> out;
    for (auto& [_, s] : indexed) out.push_back(std::move(s));
    return out;
  }

  /// Echoes "context + ' ' + words" and sums provider sub-token log-probs per word.
  std::vector<double> token_log_probs(const LogProbQuery& query) override {
    query.validate();
    const std::string continuation = text::join(query.continuation, " ");
    const std::string full = query.context + " " + continuation;
    const nlohmann::json body = {{"model", query.model_ref}, {"prompt", full}, {"max_tokens", 1},
                                 {"temperature", 0},          {"echo", true},  {"logprobs", 1}};
    const auto resp = post_json("/v1/completions", body);
    const auto& choices = resp.value("choices", nlohmann::json::array());
    if (choices.empty() || !choices[0].contains("logprobs") || choices[0]["logprobs"].is_null()) {
      throw UnsupportedError("backend did not return echoed token log-probs");
    }
    const auto& lp = choices[0]["logprobs"];
    if (!lp.contains("tokens") || !lp.contains("token_logprobs") || !lp.contains("text_offset")) {
      throw UnsupportedError("log-prob payload lacks tokens/token_logprobs/text_offset");
    }
    const auto& tokens = lp["tokens"];
    const auto& logprobs = lp["token_logprobs"];
    const auto& offsets = lp["text_offset"];
    if (tokens.size() != logprobs.size() || tokens.size() != offsets.size()) {
      throw TransportError("log-prob payload arrays differ in length");
    }

    // Offsets are in characters (code points). Word i starts at starts[i];
    // the separating space before it belongs to it.
    const std::size_t boundary = detail::utf8_length(query.context);
    const std::size_t full_len = detail::utf8_length(full);
    std::vector<std::size_t> starts;
    std::size_t pos = boundary + 1;
    for (const auto& w : query.continuation) {
      starts.push_back(pos);
      pos += detail::utf8_length(w) + 1;
    }
    std::vector<double> per_word(query.continuation.size(), 0.0);
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      const auto off = offsets[j].get<std::size_t>();
      if (off < boundary || off >= full_len) continue;
      if (logprobs[j].is_null()) throw UnsupportedError("null log-prob inside the continuation");
      const auto it = std::upper_bound(starts.begin(), starts.end(), off + 1);
      const std::size_t word = it == starts.begin() ? 0 : static_cast<std::size_t>(it - starts.begin() - 1);
      per_word[word] += logprobs[j].get<double>();
    }
    for (double& v : per_word) v = std::max(v, kZeroMassLogProb);
    return per_word;
  }

  std::string submit_finetune(const std::filesystem::path& dataset, const std::string& base_model) override {
    read_finetune_file(dataset);
    const std::string content = io::read_file(dataset);
    httplib::MultipartFormDataItems items = {
        {"purpose", "fine-tune", "", ""},
        {"file", content, dataset.filename().string(), "application/jsonl"},
    };
    const auto file = request("POST", "/v1/files", {{"purpose", "fine-tune"}, {"file", dataset.filename().string()}},
                              [&](httplib::Client& cli, const std::string& path, const httplib::Headers& h) {
                                return cli.Post(path, h, items);
                              });
    const std::string file_id = file.value("id", "");
    if (file_id.empty()) throw TransportError("file upload returned no id");

    const nlohmann::json job_body = {{"training_file", file_id},
                                     {"model", base_model},
                                     {"hyperparameters", {{"n_epochs", options_.finetune_epochs}}}};
    auto job = post_json("/v1/fine_tuning/jobs", job_body);
    const std::string job_id = job.value("id", "");
    if (job_id.empty()) throw TransportError("fine-tune job creation returned no id");

    const auto deadline = std::chrono::steady_clock::now() + options_.job_timeout;
    for (;;) {
      const std::string status = job.value("status", "");
      if (status == "succeeded") {
        const auto model = job.value("fine_tuned_model", nlohmann::json());
        if (!model.is_string()) throw JobFailed("job " + job_id + " succeeded without a model id");
        return model.get<std::string>();
      }
      if (status == "failed" || status == "cancelled") {
        std::string msg = "job " + job_id + " " + status;
        if (job.contains("error") && job["error"].is_object()) msg += ": " + job["error"].value("message", "");
        throw JobFailed(msg);
      }
      if (std::chrono::steady_clock::now() > deadline) throw BudgetError("fine-tune job " + job_id + " timed out");
      std::this_thread::sleep_for(options_.poll_interval);
      job = request("GET", "/v1/fine_tuning/jobs/" + job_id, nlohmann::json::object(),
                    [](httplib::Client& cli, const std::string& path, const httplib::Headers& h) {
                      return cli.Get(path, h);
                    });
    }
  }

  const HttpOptions& options() const noexcept { return options_; }

 private:
  using Sender = std::function<httplib::Result(httplib::Client&, const std::string&, const httplib::Headers&)>;

  nlohmann::json post_json(const std::string& endpoint, const nlohmann::json& body) {
    const std::string payload = body.dump();
    return request("POST", endpoint, body, [&](httplib::Client& cli, const std::string& path, const httplib::Headers& h) {
      return cli.Post(path, h, payload, "application/json");
    });
  }

  /// Retries connection failures, 429 and 5xx per the budget; 4xx surfaces verbatim.
  nlohmann::json request(std::string_view method, const std::string& endpoint, const nlohmann::json& logged_body,
                         const Sender& send) {
    auto permit = limiter_.acquire();
    const std::string id = ids_.next(endpoint, logged_body);
    const std::string path = url_.prefix + endpoint;
    httplib::Headers headers;
    if (!options_.api_key.empty()) headers.emplace("Authorization", "Bearer " + options_.api_key);
    headers.emplace("X-Request-Id", id);

    const auto timeout = options_.budget.request_timeout;
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);

    bool last_was_timeout = false;
    std::string last_error;
    for (std::size_t attempt = 0; attempt <= options_.budget.max_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(options_.budget.backoff(attempt - 1));
      httplib::Client cli(url_.origin);
      cli.set_connection_timeout(secs.count(), usecs.count());
      cli.set_read_timeout(secs.count(), usecs.count());
      cli.set_write_timeout(secs.count(), usecs.count());
      auto res = send(cli, path, headers);
      nlohmann::json entry = {{"request_id", id}, {"method", method}, {"endpoint", endpoint},
                              {"attempt", attempt + 1}, {"request", logged_body}};
      if (!res) {
        const auto err = res.error();
        last_was_timeout = err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout;
        last_error = httplib::to_string(err);
        entry["error"] = last_error;
        audit(entry);
        continue;
      }
      entry["status"] = res->status;
      if (res->status >= 200 && res->status < 300) {
        nlohmann::json parsed;
        try {
          parsed = nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::parse_error&) {
          entry["error"] = "unparseable body";
          audit(entry);
          throw TransportError("unparseable response from " + endpoint);
        }
        entry["response"] = parsed;
        audit(entry);
        return parsed;
      }
      entry["response_body"] = res->body;
      audit(entry);
      last_was_timeout = false;
      last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
      if (res->status == 429 || res->status >= 500) continue;
      throw BackendRefusal(res->status, res->body);
    }
    if (last_was_timeout) throw BudgetError(endpoint + " timed out: " + last_error);
    throw TransportError(endpoint + " failed after retries: " + last_error);
  }

  void audit(const nlohmann::json& entry) {
    if (options_.audit) options_.audit->append(entry);
  }

  HttpOptions options_;
  detail::SplitUrl url_;
  ConcurrencyLimiter limiter_;
  RequestIds ids_;
};

}  // namespace narrator
