#pragma once

// Minimal JSON-schema checker covering the keywords docs/report_schema.json
// uses: type, const, enum, minimum, maximum, exclusiveMinimum, required,
// properties, additionalProperties (false), items, anyOf, oneOf and local $ref.

#include <nlohmann/json.hpp>

#include <fstream>
#include <string>

namespace prunekit::testing {

class SchemaChecker {
 public:
  explicit SchemaChecker(nlohmann::json root) : root_(std::move(root)) {}

  static SchemaChecker from_file(const std::string& path) {
    std::ifstream in(path);
    return SchemaChecker(nlohmann::json::parse(in));
  }

  // Empty string when `doc` validates against `schema_ref` (e.g. "#/$defs/run_report").
  std::string check(const nlohmann::json& doc, const std::string& schema_ref = "#") const {
    std::string err;
    validate(doc, resolve(schema_ref), "$", err);
    return err;
  }

 private:
  nlohmann::json root_;

  const nlohmann::json& resolve(const std::string& ref) const {
    return root_.at(nlohmann::json::json_pointer(ref.substr(1)));
  }

  static bool type_matches(const nlohmann::json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    if (t == "number") return v.is_number();
    if (t == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
    return false;
  }

  bool validate(const nlohmann::json& v, const nlohmann::json& s, const std::string& path, std::string& err) const {
    auto fail = [&](const std::string& why) {
      if (err.empty()) err = path + ": " + why;
      return false;
    };
    if (s.contains("$ref")) return validate(v, resolve(s["$ref"]), path, err);
    if (s.contains("type")) {
      bool ok = false;
      if (s["type"].is_array()) {
        for (const auto& t : s["type"]) ok = ok || type_matches(v, t);
      } else {
        ok = type_matches(v, s["type"]);
      }
      if (!ok) return fail("type mismatch, want " + s["type"].dump());
    }
    if (s.contains("const") && v != s["const"]) return fail("want const " + s["const"].dump());
    if (s.contains("enum")) {
      bool found = false;
      for (const auto& e : s["enum"]) found = found || e == v;
      if (!found) return fail("not in enum: " + v.dump());
    }
    if (v.is_number()) {
      const double x = v.get<double>();
      if (s.contains("minimum") && x < s["minimum"].get<double>()) return fail("below minimum");
      if (s.contains("maximum") && x > s["maximum"].get<double>()) return fail("above maximum");
      if (s.contains("exclusiveMinimum") && x <= s["exclusiveMinimum"].get<double>()) return fail("not above minimum");
    }
    if (v.is_object()) {
      if (s.contains("required"))
        for (const auto& k : s["required"])
          if (!v.contains(k.get<std::string>())) return fail("missing " + k.get<std::string>());
      for (const auto& [k, sub] : v.items()) {
        if (s.contains("properties") && s["properties"].contains(k)) {
          if (!validate(sub, s["properties"][k], path + "." + k, err)) return false;
        } else if (s.contains("additionalProperties") && s["additionalProperties"] == false) {
          return fail("unexpected property " + k);
        }
      }
    }
    if (v.is_array() && s.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i)
        if (!validate(v[i], s["items"], path + "[" + std::to_string(i) + "]", err)) return false;
    if (s.contains("anyOf") || s.contains("oneOf")) {
      const bool one = s.contains("oneOf");
      int matches = 0;
      for (const auto& alt : s[one ? "oneOf" : "anyOf"]) {
        std::string sub_err;
        matches += validate(v, alt, path, sub_err) ? 1 : 0;
      }
      if (one ? matches != 1 : matches == 0) return fail(one ? "oneOf matched " + std::to_string(matches) : "no anyOf branch matched");
    }
    return true;
  }
};

}  // namespace prunekit::testing
