#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "lapo/errors.hpp"

namespace lapo {

// Append-only JSONL metrics sink; every line is flushed so a crashed run
// leaves a valid prefix.
class JsonlWriter {
 public:
  JsonlWriter() = default;

  explicit JsonlWriter(const std::string& path) { open(path); }

  void open(const std::string& path) {
    f_.open(path, std::ios::out | std::ios::app);
    if (!f_) throw IoError("cannot open metrics file: " + path);
    open_ = true;
  }

  bool is_open() const { return open_; }

  void write(const nlohmann::json& row) {
    if (!open_) return;
    f_ << row.dump() << "\n";
    f_.flush();
  }

 private:
  std::ofstream f_;
  bool open_ = false;
};

}  // namespace lapo
