#pragma once

// Chat fine-tuning files: one JSON object per line, {"messages": [{role, content}, ...]}.

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "narrator/errors.hpp"
#include "narrator/io.hpp"

namespace narrator {

struct ChatMessage {
  std::string role;
  std::string content;

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct FinetuneRecord {
  std::vector<ChatMessage> messages;

  friend bool operator==(const FinetuneRecord&, const FinetuneRecord&) = default;

  const std::string* first(std::string_view role) const {
    for (const auto& m : messages) {
      if (m.role == role) return &m.content;
    }
    return nullptr;
  }
};

/// Throws ValidationError(line, ...) unless `rec` matches the chat fine-tuning schema.
inline FinetuneRecord parse_finetune_record(const nlohmann::json& rec, std::size_t line) {
  if (!rec.is_object()) throw ValidationError(line, "record must be an object");
  if (rec.size() != 1 || !rec.contains("messages")) throw ValidationError(line, "record must have exactly the key \"messages\"");
  const auto& msgs = rec.at("messages");
  if (!msgs.is_array() || msgs.empty()) throw ValidationError(line, "messages must be a non-empty array");
  FinetuneRecord out;
  bool has_user = false;
  for (const auto& m : msgs) {
    if (!m.is_object() || m.size() != 2 || !m.contains("role") || !m.contains("content")) {
      throw ValidationError(line, "each message must have exactly role and content");
    }
    if (!m.at("role").is_string() || !m.at("content").is_string()) {
      throw ValidationError(line, "role and content must be strings");
    }
    ChatMessage cm{m.at("role").get<std::string>(), m.at("content").get<std::string>()};
    if (cm.role != "system" && cm.role != "user" && cm.role != "assistant") {
      throw ValidationError(line, "unknown role \"" + cm.role + "\"");
    }
    has_user = has_user || cm.role == "user";
    out.messages.push_back(std::move(cm));
  }
  if (!has_user) throw ValidationError(line, "no user message");
  if (out.messages.back().role != "assistant") throw ValidationError(line, "last message must be from the assistant");
  if (out.messages.back().content.empty()) throw ValidationError(line, "empty assistant message");
  return out;
}

inline nlohmann::json finetune_record_to_json(const FinetuneRecord& rec) {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : rec.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  return {{"messages", std::move(msgs)}};
}

inline std::vector<FinetuneRecord> parse_finetune_text(std::string_view content) {
  std::vector<FinetuneRecord> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < content.size()) {
    auto end = content.find('\n', start);
    if (end == std::string_view::npos) end = content.size();
    const std::string_view line = content.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.empty()) throw ValidationError(line_no, "blank line");
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(line_no, std::string("invalid JSON: ") + e.what());
    }
    out.push_back(parse_finetune_record(rec, line_no));
  }
  if (out.empty()) throw ValidationError(0, "fine-tune file has no records");
  return out;
}

inline std::vector<FinetuneRecord> read_finetune_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw PreconditionError("fine-tune file " + path.string() + " does not exist");
  return parse_finetune_text(io::read_file(path));
}

inline std::string render_finetune_text(const std::vector<FinetuneRecord>& records) {
  std::string out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto j = finetune_record_to_json(records[i]);
    parse_finetune_record(j, i + 1);
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void write_finetune_file(const std::filesystem::path& path, const std::vector<FinetuneRecord>& records) {
  if (records.empty()) throw PreconditionError("refusing to write an empty fine-tune file");
  io::write_file_atomic(path, render_finetune_text(records));
}

}  // namespace narrator
