#pragma once

#include <stdexcept>
#include <string>

namespace mmcdet {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map any failure to a nonzero exit code with one catch.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

class UnknownToken : public Error {
 public:
  explicit UnknownToken(const std::string& word)
      : Error("unknown token: '" + word + "'"), word_(word) {}
  const std::string& word() const { return word_; }

 private:
  std::string word_;
};

class EmptyCaption : public Error {
 public:
  EmptyCaption() : Error("empty caption") {}
};

class UnknownConcept : public Error {
 public:
  explicit UnknownConcept(const std::string& concept_name)
      : Error("concept not in scoring vocabulary: '" + concept_name + "'") {}
};

class DegenerateInput : public Error {
 public:
  explicit DegenerateInput(const std::string& what) : Error("degenerate input: " + what) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class IOError : public Error {
 public:
  explicit IOError(const std::string& what) : Error("io error: " + what) {}
};

}  // namespace mmcdet
