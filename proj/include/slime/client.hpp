#pragma once

// Provider-agnostic chat client: content-addressed requests, a JSONL
// record/replay cache, retries with backoff and a FIFO concurrency gate.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <ctime>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "slime/digest.hpp"
#include "slime/error.hpp"

namespace slime {

// ---------------------------------------------------------------------------
// Requests

struct ImagePayload {
  std::string media_type;  // e.g. "image/jpeg"
  std::string base64;
};

struct ChatMessage {
  std::string role;  // system | user | assistant
  std::string text;
  std::optional<ImagePayload> image;
};

struct ChatRequest {
  std::string provider;
  std::string model;
  std::vector<ChatMessage> messages;
  int max_tokens = 1024;
  double temperature = 0.0;
  std::string prompt_id;  // template id@version, empty for ad-hoc requests

  /// Canonical form: sorted keys, images replaced by the digest of their data.
  nlohmann::json canonical_json() const {
    nlohmann::json msgs = nlohmann::json::array();
    for (const auto& m : messages) {
      nlohmann::json jm = {{"role", m.role}, {"text", m.text}};
      if (m.image) jm["image"] = {{"media_type", m.image->media_type}, {"sha256", sha256_hex(m.image->base64)}};
      msgs.push_back(std::move(jm));
    }
    return {{"provider", provider}, {"model", model},       {"messages", msgs},
            {"max_tokens", max_tokens}, {"temperature", temperature}, {"prompt_id", prompt_id}};
  }

  /// Content address of the request; independent of JSON key order and layout.
  std::string hash() const { return sha256_hex(canonical_json().dump()); }

  nlohmann::json to_json() const {
    auto j = canonical_json();
    for (std::size_t i = 0; i < messages.size(); ++i) {
      if (messages[i].image) j["messages"][i]["image"]["base64"] = messages[i].image->base64;
    }
    return j;
  }

  static ChatRequest from_json(const nlohmann::json& j) {
    try {
      ChatRequest r;
      r.provider = j.at("provider").get<std::string>();
      r.model = j.at("model").get<std::string>();
      r.max_tokens = j.value("max_tokens", 1024);
      r.temperature = j.value("temperature", 0.0);
      r.prompt_id = j.value("prompt_id", std::string());
      for (const auto& m : j.at("messages")) {
        ChatMessage cm{m.at("role").get<std::string>(), m.at("text").get<std::string>(), std::nullopt};
        if (m.contains("image")) {
          cm.image = ImagePayload{m.at("image").at("media_type").get<std::string>(),
                                  m.at("image").at("base64").get<std::string>()};
        }
        r.messages.push_back(std::move(cm));
      }
      return r;
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::kMalformedLine, std::string("chat request: ") + e.what());
    }
  }
};

/// OpenAI-compatible chat-completions body.
inline nlohmann::json to_wire_json(const ChatRequest& r) {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : r.messages) {
    if (!m.image) {
      msgs.push_back({{"role", m.role}, {"content", m.text}});
      continue;
    }
    nlohmann::json parts = nlohmann::json::array();
    if (!m.text.empty()) parts.push_back({{"type", "text"}, {"text", m.text}});
    parts.push_back({{"type", "image_url"},
                     {"image_url", {{"url", "data:" + m.image->media_type + ";base64," + m.image->base64}}}});
    msgs.push_back({{"role", m.role}, {"content", parts}});
  }
  return {{"model", r.model}, {"messages", msgs}, {"max_tokens", r.max_tokens}, {"temperature", r.temperature}};
}

/// Extracts choices[0].message.content from a chat-completions reply.
inline std::string parse_wire_response(std::string_view body) {
  const auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw ParseError("provider reply is not JSON", std::string(body));
  const auto* content = [&]() -> const nlohmann::json* {
    if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) return nullptr;
    const auto& c = j["choices"][0];
    if (!c.is_object() || !c.contains("message") || !c["message"].is_object()) return nullptr;
    const auto& msg = c["message"];
    return msg.contains("content") && msg["content"].is_string() ? &msg["content"] : nullptr;
  }();
  if (!content) throw ParseError("provider reply has no choices[0].message.content", std::string(body));
  return content->get<std::string>();
}

// ---------------------------------------------------------------------------
// Transport

struct HttpReply {
  int status = 0;  // 0: the request never produced an HTTP status
  std::string body;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpReply send(const ChatRequest& request) = 0;
};

/// Throws on any use. Replay runs install it to prove they stay offline.
class FailOnUseTransport final : public Transport {
 public:
  HttpReply send(const ChatRequest& request) override {
    ++attempts_;
    fail(Errc::kProviderError, "network use attempted in offline mode (prompt " + request.prompt_id + ")");
  }
  std::size_t attempts() const noexcept { return attempts_.load(); }

 private:
  std::atomic<std::size_t> attempts_{0};
};

// ---------------------------------------------------------------------------
// Replay cache

struct CacheEntry {
  std::string hash;
  nlohmann::json request;
  std::string response;
  std::string timestamp;
  std::string provider;

  nlohmann::json to_json() const {
    return {{"hash", hash}, {"request", request}, {"response", response}, {"timestamp", timestamp}, {"provider", provider}};
  }
};

/// Append-only JSONL store keyed by request hash. An existing hash is never
/// overwritten.
class ReplayCache {
 public:
  ReplayCache() = default;

  explicit ReplayCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_);
    if (!in) return;  // a missing file is an empty cache
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line.front() == '#') continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("hash") || !j.contains("response")) {
        fail(Errc::kMalformedLine, path_.string() + ":" + std::to_string(lineno) + ": not a cache entry");
      }
      CacheEntry e{j["hash"].get<std::string>(), j.value("request", nlohmann::json::object()),
                   j["response"].get<std::string>(), j.value("timestamp", std::string()),
                   j.value("provider", std::string())};
      entries_.emplace(e.hash, std::move(e));
    }
  }

  std::optional<CacheEntry> find(const std::string& hash) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find(hash);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  /// Adds the entry and appends it to the file. Returns false (and writes
  /// nothing) when the hash is already present.
  bool append(CacheEntry entry) {
    std::unique_lock lock(mu_);
    if (entries_.count(entry.hash)) return false;
    if (!path_.empty()) {
      if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
      std::ofstream out(path_, std::ios::binary | std::ios::app);
      if (!out) fail(Errc::kIoError, "cannot append to " + path_.string());
      out << entry.to_json().dump() << '\n';
    }
    entries_.emplace(entry.hash, std::move(entry));
    return true;
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, CacheEntry> entries_;
};

// ---------------------------------------------------------------------------
// Concurrency gate

/// Admits at most `capacity` holders; waiters are admitted in arrival order.
class ConcurrencyGate {
 public:
  explicit ConcurrencyGate(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 1)) {}

  class Slot {
   public:
    Slot() = default;
    explicit Slot(ConcurrencyGate* gate) : gate_(gate) {}
    Slot(Slot&& o) noexcept : gate_(std::exchange(o.gate_, nullptr)) {}
    Slot& operator=(Slot&& o) noexcept {
      if (this != &o) {
        release();
        gate_ = std::exchange(o.gate_, nullptr);
      }
      return *this;
    }
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;
    ~Slot() { release(); }

    void release() {
      if (gate_) std::exchange(gate_, nullptr)->leave();
    }

   private:
    ConcurrencyGate* gate_ = nullptr;
  };

  Slot acquire() {
    std::unique_lock lock(mu_);
    const std::uint64_t ticket = next_ticket_++;
    queue_.push_back(ticket);
    cv_.wait(lock, [&] { return in_flight_ < capacity_ && queue_.front() == ticket; });
    queue_.pop_front();
    ++in_flight_;
    peak_ = std::max(peak_, in_flight_);
    cv_.notify_all();  // the next waiter may also fit
    return Slot(this);
  }

  std::size_t capacity() const noexcept { return capacity_; }

  std::size_t waiting() const {
    std::lock_guard lock(mu_);
    return queue_.size();
  }

  std::size_t peak() const {
    std::lock_guard lock(mu_);
    return peak_;
  }

 private:
  void leave() {
    std::lock_guard lock(mu_);
    --in_flight_;
    cv_.notify_all();
  }

  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::uint64_t> queue_;
  std::uint64_t next_ticket_ = 0;
  std::size_t in_flight_ = 0;
  std::size_t peak_ = 0;
};

// ---------------------------------------------------------------------------
// Client

enum class ClientMode { kLive, kRecord, kReplay };

inline std::string_view client_mode_name(ClientMode m) {
  switch (m) {
    case ClientMode::kLive: return "live";
    case ClientMode::kRecord: return "record";
    case ClientMode::kReplay: return "replay";
  }
  return "?";
}

inline ClientMode parse_client_mode(std::string_view s) {
  if (s == "live") return ClientMode::kLive;
  if (s == "record") return ClientMode::kRecord;
  if (s == "replay") return ClientMode::kReplay;
  fail(Errc::kConfigError, "client mode must be live, record or replay, got '" + std::string(s) + "'");
}

struct RetryPolicy {
  int max_retries = 5;
  std::chrono::milliseconds base_delay{1000};
  double jitter = 0.25;  // each delay is stretched by a uniform factor in [1, 1 + jitter)
};

inline bool is_retryable_status(int status) { return status == 0 || status == 429 || status >= 500; }

/// UTC ISO-8601 timestamp of the current time.
inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct ClientOptions {
  ClientMode mode = ClientMode::kReplay;
  std::size_t max_concurrency = 4;
  RetryPolicy retry;
  std::uint64_t jitter_seed = 0;
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  std::function<std::string()> clock = utc_now;
};

class ChatClient {
 public:
  ChatClient(ClientOptions options, std::shared_ptr<Transport> transport, std::shared_ptr<ReplayCache> cache)
      : options_(std::move(options)),
        transport_(std::move(transport)),
        cache_(std::move(cache)),
        gate_(options_.max_concurrency),
        jitter_rng_(options_.jitter_seed) {
    if (options_.mode != ClientMode::kLive && !cache_) fail(Errc::kConfigError, "record and replay modes need a cache");
    if (!transport_) transport_ = std::make_shared<FailOnUseTransport>();
  }

  ClientMode mode() const noexcept { return options_.mode; }

  /// Response text for `request`. Replay mode answers only from the cache.
  std::string chat(const ChatRequest& request) { return complete(request).response; }

  /// As chat(), but returns the cache entry (hash, timestamp) too.
  CacheEntry complete(const ChatRequest& request) {
    const std::string hash = request.hash();
    if (options_.mode != ClientMode::kLive) {
      if (auto hit = cache_->find(hash)) {
        ++cache_hits_;
        note_use(request, *hit);
        return *hit;
      }
      if (options_.mode == ClientMode::kReplay) {
        fail(Errc::kCacheMiss, "no cached response for " + hash.substr(0, 12) + " (prompt " + request.prompt_id + ")");
      }
    }
    std::string text = call_with_retries(request);
    CacheEntry entry{hash, request.canonical_json(), std::move(text), options_.clock(), request.provider};
    if (options_.mode == ClientMode::kRecord && !cache_->append(entry)) {
      if (auto existing = cache_->find(hash)) entry = *existing;  // a concurrent caller recorded it first
    }
    note_use(request, entry);
    return entry;
  }

  /// Template ids of every request answered so far.
  std::set<std::string> prompt_ids_used() const {
    std::lock_guard lock(usage_mu_);
    return prompt_ids_;
  }

  /// Latest timestamp among the responses returned so far (ISO-8601 strings
  /// order chronologically).
  std::string latest_timestamp() const {
    std::lock_guard lock(usage_mu_);
    return latest_timestamp_;
  }

  std::size_t network_calls() const noexcept { return network_calls_.load(); }
  std::size_t cache_hits() const noexcept { return cache_hits_.load(); }
  const ConcurrencyGate& gate() const noexcept { return gate_; }

 private:
  void note_use(const ChatRequest& request, const CacheEntry& entry) {
    std::lock_guard lock(usage_mu_);
    if (!request.prompt_id.empty()) prompt_ids_.insert(request.prompt_id);
    latest_timestamp_ = std::max(latest_timestamp_, entry.timestamp);
  }

  std::chrono::milliseconds backoff(int attempt) {
    double factor = 1.0;
    {
      std::lock_guard lock(rng_mu_);
      factor += options_.retry.jitter * std::uniform_real_distribution<double>(0.0, 1.0)(jitter_rng_);
    }
    const double ms = static_cast<double>(options_.retry.base_delay.count()) * static_cast<double>(1ull << attempt) * factor;
    return std::chrono::milliseconds(static_cast<std::int64_t>(ms));
  }

  std::string call_with_retries(const ChatRequest& request) {
    auto slot = gate_.acquire();
    HttpReply reply;
    for (int attempt = 0;; ++attempt) {
      ++network_calls_;
      try {
        reply = transport_->send(request);
      } catch (const Error&) {
        throw;
      } catch (const std::exception& e) {
        reply = {0, e.what()};
      }
      if (reply.status >= 200 && reply.status < 300) return parse_wire_response(reply.body);
      if (!is_retryable_status(reply.status) || attempt >= options_.retry.max_retries) break;
      options_.sleep(backoff(attempt));
    }
    throw ProviderError(reply.status, reply.body.substr(0, 300));
  }

  ClientOptions options_;
  std::shared_ptr<Transport> transport_;
  std::shared_ptr<ReplayCache> cache_;
  ConcurrencyGate gate_;
  std::mutex rng_mu_;
  std::mt19937_64 jitter_rng_;
  std::atomic<std::size_t> network_calls_{0};
  std::atomic<std::size_t> cache_hits_{0};
  mutable std::mutex usage_mu_;
  std::set<std::string> prompt_ids_;
  std::string latest_timestamp_;
};

}  // namespace slime
