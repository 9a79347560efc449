#pragma once

#include <condition_variable>
#include <cstddef>
#include <mutex>
#include <optional>
#include <string>

namespace prag::remote {

/// An HTTP endpoint speaking one JSON object per line in each direction.
struct Endpoint {
  std::string url;  // http://host[:port]/path
  double timeout_seconds = 30.0;
  int retries = 2;
  std::size_t max_in_flight = 4;
};

/// Reads the endpoint URL from `url_var`; timeout and retries may be
/// overridden with `<url_var minus _URL>_TIMEOUT` / `_RETRIES`.
std::optional<Endpoint> endpoint_from_env(const std::string& url_var);

/// Counting semaphore bounding concurrent requests.
class Limiter {
 public:
  explicit Limiter(std::size_t limit) : free_(limit == 0 ? 1 : limit) {}
  void acquire();
  void release();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t free_;
};

/// POSTs `line` (a JSON object without newline) and returns the first line of
/// the response body. Retries on transport errors and 5xx; throws RemoteError
/// when every attempt fails.
std::string post_line(const Endpoint& endpoint, const std::string& line, Limiter* limiter = nullptr);

}  // namespace prag::remote
