#include "prag/remote.hpp"

#include <cstdlib>

#include <httplib.h>

#include "prag/error.hpp"

namespace prag::remote {

namespace {

struct ParsedUrl {
  std::string origin;  // scheme://host:port
  std::string path;
};

ParsedUrl parse_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos || url.compare(0, scheme, "http") != 0)
    throw ConfigError("remote endpoint must be an http:// URL: '" + url + "'");
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

}  // namespace

std::optional<Endpoint> endpoint_from_env(const std::string& url_var) {
  const char* url = std::getenv(url_var.c_str());
  if (!url || !*url) return std::nullopt;
  Endpoint e;
  e.url = url;
  std::string base = url_var;
  if (base.size() > 4 && base.ends_with("_URL")) base.resize(base.size() - 4);
  if (const char* t = std::getenv((base + "_TIMEOUT").c_str())) e.timeout_seconds = std::atof(t);
  if (const char* r = std::getenv((base + "_RETRIES").c_str())) e.retries = std::atoi(r);
  if (const char* m = std::getenv((base + "_MAX_IN_FLIGHT").c_str())) e.max_in_flight = std::strtoul(m, nullptr, 10);
  if (e.timeout_seconds <= 0 || e.retries < 0) throw ConfigError("invalid timeout/retry settings for " + url_var);
  return e;
}

void Limiter::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return free_ > 0; });
  --free_;
}

void Limiter::release() {
  {
    std::lock_guard lock(mu_);
    ++free_;
  }
  cv_.notify_one();
}

std::string post_line(const Endpoint& endpoint, const std::string& line, Limiter* limiter) {
  const auto url = parse_url(endpoint.url);
  if (limiter) limiter->acquire();
  struct Release {
    Limiter* l;
    ~Release() {
      if (l) l->release();
    }
  } release{limiter};

  httplib::Client client(url.origin);
  const auto secs = static_cast<time_t>(endpoint.timeout_seconds);
  const auto usecs = static_cast<time_t>((endpoint.timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);

  std::string last_error;
  for (int attempt = 0; attempt <= endpoint.retries; ++attempt) {
    auto res = client.Post(url.path, line + "\n", "application/x-ndjson");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw RemoteError(endpoint.url + " answered HTTP " + std::to_string(res->status));
    const auto nl = res->body.find('\n');
    return nl == std::string::npos ? res->body : res->body.substr(0, nl);
  }
  throw RemoteError(endpoint.url + " failed after " + std::to_string(endpoint.retries + 1) +
                    " attempts: " + last_error);
}

}  // namespace prag::remote
