#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace topicguard {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A record violates one of the data-model invariants.
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Malformed input: JSON, JSONL, model replies that cannot be parsed.
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what, std::size_t line = 0,
                      std::string raw = {})
      : Error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line),
        raw_(std::move(raw)) {}

  // 1-based line number, 0 when not applicable.
  std::size_t line() const noexcept { return line_; }
  // Raw text that failed to parse (model reply etc.), may be empty.
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::size_t line_;
  std::string raw_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Violated operation precondition (empty message list etc.).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// HTTP failure that survived the retry budget.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int status)
      : Error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

// The endpoint answered, but not with something usable.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class ScriptedMissError : public Error {
 public:
  explicit ScriptedMissError(std::string fingerprint)
      : Error("no scripted reply for request fingerprint " + fingerprint),
        fingerprint_(std::move(fingerprint)) {}
  const std::string& fingerprint() const noexcept { return fingerprint_; }

 private:
  std::string fingerprint_;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class AnchoringError : public Error {
 public:
  using Error::Error;
};

}  // namespace topicguard
