#include "musiq/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

namespace musiq {

using nlohmann::json;

void write_checkpoint(const std::string& path, const CheckpointFile& file) {
  json header;
  header["config"] = json::parse(file.config.to_json());
  json tensors = json::array();
  for (const TensorIndexEntry& e : file.index) {
    json t;
    t["name"] = e.name;
    t["dtype"] = e.dtype;
    t["shape"] = e.shape;
    t["offset"] = e.offset;
    t["bytes"] = e.bytes;
    tensors.push_back(t);
  }
  header["tensors"] = tensors;
  std::string text = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  f << kCheckpointMagic << "\n" << text.size() << "\n" << text << "\n";
  f.write(reinterpret_cast<const char*>(file.payload.data()),
          static_cast<std::streamsize>(file.payload.size()));
  if (!f) throw IoError("checkpoint write failed: " + path);
}

CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string magic;
  if (!std::getline(f, magic) || magic != kCheckpointMagic)
    throw IoError("not a checkpoint file (bad magic): " + path);
  std::string len_line;
  if (!std::getline(f, len_line)) throw IoError("checkpoint: truncated header");
  size_t header_len = 0;
  try {
    header_len = std::stoull(len_line);
  } catch (...) {
    throw IoError("checkpoint: malformed header length");
  }
  std::string text(header_len, '\0');
  f.read(text.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<size_t>(f.gcount()) != header_len)
    throw IoError("checkpoint: truncated header");
  char sep = 0;
  f.get(sep);
  if (sep != '\n') throw IoError("checkpoint: malformed header terminator");

  CheckpointFile out;
  try {
    json header = json::parse(text);
    out.config = ModelConfig::from_json(header.at("config").dump());
    for (const json& t : header.at("tensors")) {
      TensorIndexEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = t.at("dtype").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      e.offset = t.at("offset").get<uint64_t>();
      e.bytes = t.at("bytes").get<uint64_t>();
      out.index.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }

  out.payload.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  for (const TensorIndexEntry& e : out.index) {
    if (e.offset + e.bytes > out.payload.size())
      throw IoError("checkpoint: tensor " + e.name + " lies outside the file");
    if (e.bytes != static_cast<uint64_t>(shape_numel(e.shape)) *
                        (e.dtype == "float64" ? 8 : 4))
      throw IoError("checkpoint: tensor " + e.name + " byte length mismatch");
  }
  return out;
}

}  // namespace musiq
