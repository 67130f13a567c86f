#include "canonxai/dataset.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace canonxai {

namespace fs = std::filesystem;

namespace {

constexpr char kMagicF32[] = "CXAI_F32";
constexpr char kMagicU8[] = "CXAI_U8_";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& buf, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  return v;
}

std::string header(const char* magic, const Shape& shape) {
  std::string out(magic, 8);
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) put_u32(out, static_cast<std::uint32_t>(e));
  return out;
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing '" + path + "'");
}

}  // namespace

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::string out = header(kMagicF32, t.shape());
  for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  write_bytes(path, out);
}

void save_mask_file(const std::string& path, const Tensor& mask) {
  std::string out = header(kMagicU8, mask.shape());
  for (float v : mask.data()) {
    if (v != 0.0f && v != 1.0f) throw ParameterError("mask values must be 0 or 1");
    out.push_back(static_cast<char>(v != 0.0f));
  }
  write_bytes(path, out);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "'");
  const std::string buf{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  if (buf.size() < 12) throw ParseError(path + ": truncated tensor header");
  const bool is_f32 = buf.compare(0, 8, kMagicF32, 8) == 0;
  const bool is_u8 = buf.compare(0, 8, kMagicU8, 8) == 0;
  if (!is_f32 && !is_u8) throw ParseError(path + ": unknown tensor magic");
  const std::uint32_t rank = get_u32(buf, 8);
  if (rank == 0 || buf.size() < 12 + 4ull * rank) throw ParseError(path + ": bad tensor rank");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get_u32(buf, 12 + 4 * i));
  for (auto e : shape)
    if (e == 0) throw ParseError(path + ": zero extent");
  const std::size_t n = shape_numel(shape);
  const std::size_t offset = 12 + 4ull * rank;
  const std::size_t width = is_f32 ? 4 : 1;
  if (buf.size() != offset + n * width) throw ParseError(path + ": payload size does not match shape");
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = is_f32 ? std::bit_cast<float>(get_u32(buf, offset + 4 * i))
                     : static_cast<float>(static_cast<unsigned char>(buf[offset + i]));
  }
  return Tensor(shape, std::move(data));
}

std::vector<Sample> load_dataset(const std::string& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw Error("cannot open dataset manifest '" + manifest_path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest_path + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("samples") || !j.at("samples").is_array()) {
    throw ParseError(manifest_path + ": expected {\"samples\": [...]}");
  }
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<Sample> out;
  for (const auto& js : j.at("samples")) {
    Sample s;
    try {
      s.id = js.at("id").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw ParseError(manifest_path + ": sample without id");
    }
    auto load = [&](const char* key) {
      std::string rel;
      try {
        rel = js.at(key).get<std::string>();
      } catch (const nlohmann::json::exception&) {
        throw DatasetError("sample '" + s.id + "': missing '" + key + "'", s.id);
      }
      const fs::path p = base / rel;
      if (!fs::exists(p)) throw DatasetError("sample '" + s.id + "': file '" + p.string() + "' not found", s.id);
      try {
        return load_tensor_file(p.string());
      } catch (const Error& e) {
        throw DatasetError("sample '" + s.id + "': " + e.what(), s.id);
      }
    };
    s.image = load("image");
    if (s.image.rank() != 3) {
      throw DatasetError("sample '" + s.id + "': image must be C x H x W, got " + shape_to_string(s.image.shape()),
                         s.id);
    }
    try {
      s.label = js.at("label").get<std::size_t>();
    } catch (const nlohmann::json::exception&) {
      throw DatasetError("sample '" + s.id + "': missing or invalid label", s.id);
    }
    if (js.contains("mask") && !js.at("mask").is_null()) {
      Tensor m = load("mask");
      if (m.rank() != 2 || m.dim(0) != s.image.dim(1) || m.dim(1) != s.image.dim(2)) {
        throw DatasetError("sample '" + s.id + "': mask " + shape_to_string(m.shape()) + " does not match image " +
                               shape_to_string(s.image.shape()),
                           s.id);
      }
      s.mask = std::move(m);
    }
    if (!out.empty() && out.front().image.shape() != s.image.shape()) {
      throw DatasetError("sample '" + s.id + "': image shape " + shape_to_string(s.image.shape()) +
                             " differs from " + shape_to_string(out.front().image.shape()),
                         s.id);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const std::string& manifest_path, const std::vector<Sample>& samples) {
  const fs::path base = fs::path(manifest_path).parent_path();
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : samples) {
    nlohmann::json js;
    js["id"] = s.id;
    js["label"] = s.label;
    const std::string image = s.id + ".image.cxt";
    save_tensor_file((base / image).string(), s.image);
    js["image"] = image;
    if (s.mask) {
      const std::string mask = s.id + ".mask.cxt";
      save_mask_file((base / mask).string(), *s.mask);
      js["mask"] = mask;
    }
    arr.push_back(std::move(js));
  }
  nlohmann::json j;
  j["samples"] = std::move(arr);
  write_bytes(manifest_path, j.dump(2) + "\n");
}

}  // namespace canonxai
