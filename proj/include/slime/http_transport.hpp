#pragma once

// HTTPS transport for OpenAI-compatible chat-completions endpoints. Only the
// CLI includes this header; it needs cpp-httplib built with OpenSSL.

#include <cctype>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>

#include <httplib.h>

#include "slime/client.hpp"
#include "slime/error.hpp"

namespace slime {

inline const std::map<std::string, std::string>& default_base_urls() {
  static const std::map<std::string, std::string> urls = {
      {"openai", "https://api.openai.com/v1"},
      {"deepseek", "https://api.deepseek.com/v1"},
      {"gemini", "https://generativelanguage.googleapis.com/v1beta/openai"},
  };
  return urls;
}

inline std::string provider_env_name(std::string_view prefix, std::string_view provider) {
  std::string out(prefix);
  for (char c : provider) out += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::toupper(c)) : '_';
  return out;
}

struct Endpoint {
  std::string base_url;  // scheme://host[:port][/path]
  std::string api_key;
};

/// SLIME_BASE_URL_<PROVIDER> and SLIME_API_KEY_<PROVIDER>, falling back to the
/// built-in URL for known providers.
inline Endpoint endpoint_from_env(const std::string& provider) {
  Endpoint e;
  if (const char* url = std::getenv(provider_env_name("SLIME_BASE_URL_", provider).c_str())) {
    e.base_url = url;
  } else if (auto it = default_base_urls().find(provider); it != default_base_urls().end()) {
    e.base_url = it->second;
  } else {
    fail(Errc::kConfigError, "no base URL for provider '" + provider + "'; set " + provider_env_name("SLIME_BASE_URL_", provider));
  }
  const auto key_var = provider_env_name("SLIME_API_KEY_", provider);
  const char* key = std::getenv(key_var.c_str());
  if (!key || !*key) fail(Errc::kConfigError, key_var + " is not set");
  e.api_key = key;
  return e;
}

class HttpTransport final : public Transport {
 public:
  explicit HttpTransport(std::chrono::seconds timeout = std::chrono::seconds(120)) : timeout_(timeout) {}

  HttpReply send(const ChatRequest& request) override {
    const Endpoint ep = endpoint(request.provider);
    const auto scheme_end = ep.base_url.find("://");
    const auto path_start = ep.base_url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    const std::string origin = ep.base_url.substr(0, path_start);
    const std::string path = (path_start == std::string::npos ? std::string() : ep.base_url.substr(path_start)) + "/chat/completions";

    httplib::Client cli(origin);
    cli.set_connection_timeout(timeout_);
    cli.set_read_timeout(timeout_);
    cli.set_write_timeout(timeout_);
    const httplib::Headers headers = {{"Authorization", "Bearer " + ep.api_key}};
    auto res = cli.Post(path, headers, to_wire_json(request).dump(), "application/json");
    if (!res) return {0, httplib::to_string(res.error())};
    return {res->status, res->body};
  }

 private:
  Endpoint endpoint(const std::string& provider) {
    std::lock_guard lock(mu_);
    auto it = endpoints_.find(provider);
    if (it == endpoints_.end()) it = endpoints_.emplace(provider, endpoint_from_env(provider)).first;
    return it->second;
  }

  std::chrono::seconds timeout_;
  std::mutex mu_;
  std::map<std::string, Endpoint> endpoints_;
};

}  // namespace slime
