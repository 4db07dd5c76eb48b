#include "buildtwin/ids.hpp"

#include <cstdio>

namespace buildtwin {

IdGenerator::IdGenerator() : rng_(std::random_device{}()) {}

std::string IdGenerator::next(const std::string& prefix) {
  std::uint64_t v;
  {
    std::lock_guard lock(mu_);
    v = rng_();
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return prefix + "-" + buf;
}

IdGenerator& default_ids() {
  static IdGenerator ids;
  return ids;
}

bool constant_time_equals(const std::string& expected, const std::string& given) {
  unsigned char diff = expected.size() == given.size() ? 0 : 1;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    unsigned char g = i < given.size() ? static_cast<unsigned char>(given[i]) : 0;
    diff |= static_cast<unsigned char>(expected[i]) ^ g;
  }
  return diff == 0;
}

}  // namespace buildtwin
