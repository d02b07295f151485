#pragma once

#include <charconv>
#include <stdexcept>
#include <string>
#include <system_error>

namespace protoshap {

// Shortest decimal form that round-trips to the same double bit pattern.
inline std::string format_double(double v) {
  char buf[40];
  const std::to_chars_result r = std::to_chars(buf, buf + sizeof buf, v);
  if (r.ec != std::errc{}) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& token) {
  double v = 0.0;
  const char* first = token.data();
  const char* last = first + token.size();
  const std::from_chars_result r = std::from_chars(first, last, v);
  if (r.ec != std::errc{} || r.ptr != last)
    throw std::runtime_error("not a number: '" + token + "'");
  return v;
}

}  // namespace protoshap
