#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "canonxai/error.hpp"
#include "canonxai/graph.hpp"

namespace canonxai {

using nlohmann::json;

namespace {

constexpr const char* kFormatName = "canonxai-model";
constexpr int kFormatVersion = 1;

void append_f32_le(std::vector<std::uint8_t>& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float read_f32_le(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

std::string blob_name(const LayerNode& n, const std::string& param) { return n.id + "." + param; }

template <typename T>
T require(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) {
    throw ParseError(where + ": missing key '" + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + ": bad value for '" + key + "': " + e.what());
  }
}

}  // namespace

SerializedModel save_model(const ModelGraph& graph) {
  SerializedModel out;
  json manifest;
  manifest["format"] = kFormatName;
  manifest["version"] = kFormatVersion;
  manifest["input"] = graph.input_id();
  manifest["output"] = graph.output_id();
  json nodes = json::array();
  json blobs = json::object();
  for (const auto& n : graph.nodes()) {
    json jn;
    jn["id"] = n.id;
    jn["kind"] = std::string(to_string(n.kind));
    jn["inputs"] = n.inputs;
    if (!n.group.empty()) jn["group"] = n.group;
    if (!n.attrs.empty()) {
      json attrs = json::object();
      for (const auto& [k, v] : n.attrs) attrs[k] = v;
      jn["attrs"] = attrs;
    }
    if (!n.params.empty()) {
      json params = json::object();
      for (const auto& [name, t] : n.params) {
        const std::string bname = blob_name(n, name);
        params[name] = bname;
        json entry;
        entry["offset"] = out.blob.size();
        entry["length"] = t.numel() * sizeof(float);
        entry["shape"] = t.shape();
        blobs[bname] = entry;
        for (float v : t.data()) append_f32_le(out.blob, v);
      }
      jn["params"] = params;
    }
    nodes.push_back(std::move(jn));
  }
  manifest["nodes"] = std::move(nodes);
  manifest["blobs"] = std::move(blobs);
  out.manifest = manifest.dump(2) + "\n";
  return out;
}

void save_model_files(const ModelGraph& graph, const std::string& manifest_path,
                      const std::string& blob_path) {
  const auto s = save_model(graph);
  std::ofstream m(manifest_path, std::ios::binary);
  if (!m) throw Error("cannot open '" + manifest_path + "' for writing");
  m << s.manifest;
  std::ofstream b(blob_path, std::ios::binary);
  if (!b) throw Error("cannot open '" + blob_path + "' for writing");
  b.write(reinterpret_cast<const char*>(s.blob.data()), static_cast<std::streamsize>(s.blob.size()));
  if (!m || !b) throw Error("failed writing model files");
}

ModelGraph parse_model(std::string_view manifest_text, std::span<const std::uint8_t> blob) {
  json manifest;
  try {
    manifest = json::parse(manifest_text.begin(), manifest_text.end());
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (require<std::string>(manifest, "format", "manifest") != kFormatName) {
    throw ParseError("manifest: unknown format");
  }
  if (require<int>(manifest, "version", "manifest") != kFormatVersion) {
    throw ParseError("manifest: unsupported version");
  }
  const json blobs = manifest.contains("blobs") ? manifest.at("blobs") : json::object();
  if (!blobs.is_object()) throw ParseError("manifest: 'blobs' must be an object");
  const json nodes = manifest.contains("nodes") ? manifest.at("nodes") : json();
  if (!nodes.is_array()) throw ParseError("manifest: 'nodes' must be an array");

  ModelGraph g;
  for (const auto& jn : nodes) {
    LayerNode n;
    n.id = require<std::string>(jn, "id", "node");
    const std::string where = "node '" + n.id + "'";
    const auto kind_name = require<std::string>(jn, "kind", where);
    const auto kind = parse_layer_kind(kind_name);
    if (!kind) throw ParseError(where + ": unknown kind '" + kind_name + "'");
    n.kind = *kind;
    n.inputs = require<std::vector<std::string>>(jn, "inputs", where);
    if (jn.contains("group")) n.group = require<std::string>(jn, "group", where);
    if (jn.contains("attrs")) {
      n.attrs = require<std::map<std::string, std::vector<std::int64_t>>>(jn, "attrs", where);
    }
    if (jn.contains("params")) {
      const auto refs = require<std::map<std::string, std::string>>(jn, "params", where);
      for (const auto& [pname, bname] : refs) {
        if (!blobs.contains(bname)) {
          throw DanglingReferenceError(where + ": parameter '" + pname + "' references unknown blob '" +
                                           bname + "'",
                                       n.id);
        }
        const json& entry = blobs.at(bname);
        const auto offset = require<std::uint64_t>(entry, "offset", "blob '" + bname + "'");
        const auto length = require<std::uint64_t>(entry, "length", "blob '" + bname + "'");
        const auto shape = require<Shape>(entry, "shape", "blob '" + bname + "'");
        if (offset > blob.size() || length > blob.size() - offset) {
          throw BlobRangeError(where + ": blob '" + bname + "' [" + std::to_string(offset) + ", +" +
                                   std::to_string(length) + ") exceeds blob file of " +
                                   std::to_string(blob.size()) + " bytes",
                               n.id);
        }
        if (offset % 4 != 0 || length != shape_numel(shape) * sizeof(float)) {
          throw BlobRangeError(where + ": blob '" + bname + "' length does not match shape " +
                                   shape_to_string(shape),
                               n.id);
        }
        std::vector<float> data(shape_numel(shape));
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = read_f32_le(blob.data() + offset + 4 * i);
        try {
          n.params[pname] = Tensor(shape, std::move(data));
        } catch (const DimensionError& e) {
          throw ParseError(where + ": " + e.what());
        }
      }
    }
    try {
      g.add_node(std::move(n));
    } catch (const InvalidGraphError& e) {
      throw ParseError(e.what());
    }
  }
  g.set_input(require<std::string>(manifest, "input", "manifest"));
  g.set_output(require<std::string>(manifest, "output", "manifest"));

  const auto violations = validate_graph(g);
  if (!violations.empty()) {
    const auto& v = violations.front();
    switch (v.kind) {
      case Violation::Kind::DanglingReference: {
        const std::string& missing = v.node_ids.back();
        throw DanglingReferenceError(v.message, missing);
      }
      case Violation::Kind::Cycle:
        throw CycleError(v.message, v.node_ids.empty() ? "" : v.node_ids.front());
      default:
        throw InvalidGraphError(v.message, v.node_ids.empty() ? "" : v.node_ids.front());
    }
  }
  return g;
}

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

ModelGraph load_model(const std::string& manifest_path, const std::string& blob_path) {
  const std::string manifest = read_text(manifest_path);
  const std::string blob = read_text(blob_path);
  return parse_model(manifest, std::span(reinterpret_cast<const std::uint8_t*>(blob.data()), blob.size()));
}

std::string default_blob_path(const std::string& manifest_path) {
  const auto dot = manifest_path.rfind('.');
  const auto slash = manifest_path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return manifest_path + ".bin";
  return manifest_path.substr(0, dot) + ".bin";
}

}  // namespace canonxai
