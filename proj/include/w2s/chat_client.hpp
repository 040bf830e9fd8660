#pragma once

// Minimal chat-completion client shared by external zoo members and the
// external judge: bounded in-flight requests, bounded retries with
// exponential backoff, per-request timeout, JSONL audit log.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "w2s/common.hpp"

namespace w2s {

struct EndpointConfig {
  std::string url;  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string api_key_env;  // name of the variable holding the bearer token
  double timeout_s = 60.0;
  int max_retries = 3;
  int backoff_ms = 500;
  int max_in_flight = 4;

  void validate(const std::string& where) const {
    if (url.empty()) throw ConfigError(where + ".url", "required for external members");
    if (!(timeout_s > 0)) throw ConfigError(where + ".timeout_s", "must be positive");
    if (max_retries < 0) throw ConfigError(where + ".max_retries", "must be >= 0");
    if (backoff_ms < 0) throw ConfigError(where + ".backoff_ms", "must be >= 0");
    if (max_in_flight < 1 || max_in_flight > 64) throw ConfigError(where + ".max_in_flight", "must be in [1, 64]");
  }
};

/// Request failed after all retries.
class TransportError : public Error {
 public:
  TransportError(std::string client_id, std::string request_id, const std::string& what)
      : Error(client_id + " [" + request_id + "]: " + what),
        client_id_(std::move(client_id)),
        request_id_(std::move(request_id)) {}
  const std::string& client_id() const noexcept { return client_id_; }
  const std::string& request_id() const noexcept { return request_id_; }

 private:
  std::string client_id_;
  std::string request_id_;
};

/// Thread-safe JSONL sink. A default-constructed log discards entries.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(const std::filesystem::path& path)
      : out_(std::make_unique<std::ofstream>(path, std::ios::app)) {
    if (!*out_) throw Error("cannot open audit log " + path.string());
  }

  void record(const nlohmann::json& entry) {
    std::lock_guard lock(mu_);
    if (out_) {
      *out_ << entry.dump() << '\n';
      out_->flush();
    }
    ++count_;
  }

  std::size_t count() const {
    std::lock_guard lock(mu_);
    return count_;
  }

 private:
  mutable std::mutex mu_;
  std::unique_ptr<std::ofstream> out_;
  std::size_t count_ = 0;
};

class ChatClient {
 public:
  struct Reply {
    std::string content;
    std::string request_id;
    int attempts = 0;
  };

  ChatClient(std::string id, EndpointConfig config, AuditLog* log = nullptr)
      : id_(std::move(id)), config_(std::move(config)), log_(log), slots_(config_.max_in_flight) {
    config_.validate(id_);
  }

  const std::string& id() const { return id_; }
  const EndpointConfig& config() const { return config_; }

  /// Sends one user message. `attachment` (an image/video URL) is sent as an
  /// extra content part; `log_fields` are merged into the audit entry.
  Reply complete(const std::string& prompt, double temperature,
                 const std::optional<std::string>& attachment = std::nullopt,
                 const nlohmann::json& log_fields = nlohmann::json::object()) {
    const auto request_id = id_ + "-" + std::to_string(++sequence_);
    nlohmann::json content = prompt;
    if (attachment) {
      content = nlohmann::json::array({{{"type", "text"}, {"text", prompt}},
                                       {{"type", "image_url"}, {"image_url", {{"url", *attachment}}}}});
    }
    const nlohmann::json body = {{"model", config_.model},
                                 {"temperature", temperature},
                                 {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})}};

    httplib::Headers headers = {{"X-Request-Id", request_id}};
    if (!config_.api_key_env.empty()) {
      if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }

    slots_.acquire();
    struct Release {
      std::counting_semaphore<64>& s;
      ~Release() { s.release(); }
    } release{slots_};

    const auto start = std::chrono::steady_clock::now();
    std::string last_error;
    int status = 0;
    int attempt = 0;
    for (; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long>(config_.backoff_ms) << (attempt - 1)));
      httplib::Client cli(config_.url);
      const auto timeout = std::chrono::duration<double>(config_.timeout_s);
      cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      cli.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      auto res = cli.Post(config_.path, headers, body.dump(), "application/json");
      if (!res) {
        last_error = "transport: " + httplib::to_string(res.error());
        continue;
      }
      status = res->status;
      if (status < 200 || status >= 300) {
        last_error = "HTTP " + std::to_string(status);
        continue;
      }
      try {
        auto reply = nlohmann::json::parse(res->body);
        Reply out{reply.at("choices").at(0).at("message").at("content").get<std::string>(), request_id, attempt + 1};
        audit(request_id, out.attempts, start, status, true, "", log_fields);
        return out;
      } catch (const nlohmann::json::exception& e) {
        last_error = std::string("bad response body: ") + e.what();
      }
    }
    audit(request_id, attempt, start, status, false, last_error, log_fields);
    throw TransportError(id_, request_id, last_error + " after " + std::to_string(attempt) + " attempts");
  }

 private:
  void audit(const std::string& request_id, int attempts, std::chrono::steady_clock::time_point start, int status,
             bool ok, const std::string& error, const nlohmann::json& extra) {
    if (!log_) return;
    const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    nlohmann::json entry = {{"request_id", request_id}, {"client", id_},     {"attempts", attempts},
                            {"retries", std::max(0, attempts - 1)}, {"latency_ms", ms}, {"status", status},
                            {"ok", ok}};
    if (!error.empty()) entry["error"] = error;
    for (auto it = extra.begin(); it != extra.end(); ++it) entry[it.key()] = it.value();
    log_->record(entry);
  }

  std::string id_;
  EndpointConfig config_;
  AuditLog* log_;
  std::atomic<std::uint64_t> sequence_{0};
  std::counting_semaphore<64> slots_;
};

}  // namespace w2s
