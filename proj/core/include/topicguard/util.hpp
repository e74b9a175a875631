#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace topicguard {

// Lowercase hex SHA-256 of the input bytes.
std::string sha256_hex(std::string_view data);

std::string trim(std::string_view s);
// ASCII-only lowercasing; bytes >= 0x80 pass through so UTF-8 stays intact.
std::string ascii_lower(std::string_view s);
std::vector<std::string> split_lines(std::string_view text);

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temp file and renames it over `path`.
void atomic_write_file(const std::filesystem::path& path, std::string_view contents);

// Diagnostics sink. Defaults to stderr; tests swap it out.
using LogSink = std::function<void(std::string_view level, std::string_view message)>;
void set_log_sink(LogSink sink);
void log_warning(std::string_view message);
void log_info(std::string_view message);

// Runs fn(i) for i in [0, n) on at most `max_parallel` threads. After all
// items finish, rethrows the exception of the lowest failing index, if any.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t max_parallel, Fn&& fn) {
  if (n == 0) return;
  const std::size_t workers = std::clamp<std::size_t>(max_parallel, 1, n);
  std::vector<std::exception_ptr> errors(n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace topicguard
