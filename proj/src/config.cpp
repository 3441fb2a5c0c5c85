#include "fqa/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace fqa {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::size_t parse_size(const std::string& s) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  return v;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::invalid_argument("expected a number, got '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

const std::map<std::string, std::map<std::string, Setter>>& setters() {
  static const std::map<std::string, std::map<std::string, Setter>> table = {
      {"model",
       {
           {"variant", [](RunConfig& c, const std::string& v) { c.model.variant = parse_variant(v); }},
           {"conv_channels",
            [](RunConfig& c, const std::string& v) {
              std::vector<std::size_t> parts;
              std::stringstream in(v);
              for (std::string tok; std::getline(in, tok, ',');) parts.push_back(parse_size(trim(tok)));
              if (parts.size() != 4) throw std::invalid_argument("conv_channels needs 4 comma-separated values");
              for (std::size_t i = 0; i < 4; ++i) c.model.conv_channels[i] = parts[i];
            }},
           {"kernel_size", [](RunConfig& c, const std::string& v) { c.model.kernel_size = parse_size(v); }},
           {"bilstm_hidden", [](RunConfig& c, const std::string& v) { c.model.bilstm_hidden = parse_size(v); }},
           {"vocab_size", [](RunConfig& c, const std::string& v) { c.model.vocab_size = parse_size(v); }},
           {"feature_dim", [](RunConfig& c, const std::string& v) { c.model.feature_dim = parse_size(v); }},
           {"dropout", [](RunConfig& c, const std::string& v) { c.model.dropout = parse_double(v); }},
           {"attn_layers",
            [](RunConfig& c, const std::string& v) { c.model.freq_attention.n_layers = parse_size(v); }},
           {"attn_heads", [](RunConfig& c, const std::string& v) { c.model.freq_attention.n_heads = parse_size(v); }},
           {"d_model", [](RunConfig& c, const std::string& v) { c.model.freq_attention.d_model = parse_size(v); }},
           {"d_ff", [](RunConfig& c, const std::string& v) { c.model.freq_attention.d_ff = parse_size(v); }},
           {"attn_dropout",
            [](RunConfig& c, const std::string& v) { c.model.freq_attention.dropout = parse_double(v); }},
           {"positional_encoding",
            [](RunConfig& c, const std::string& v) { c.model.freq_attention.positional_encoding = parse_bool(v); }},
           {"identity_encoder",
            [](RunConfig& c, const std::string& v) { c.model.freq_attention.identity = parse_bool(v); }},
       }},
      {"train",
       {
           {"epochs", [](RunConfig& c, const std::string& v) { c.train.epochs = parse_size(v); }},
           {"batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_size(v); }},
           {"lr_schedule",
            [](RunConfig& c, const std::string& v) {
              if (v == "auto")
                c.schedule.reset();
              else
                c.schedule = parse_schedule(v);
            }},
           {"learning_rate",
            [](RunConfig& c, const std::string& v) { c.train.schedule.constant_lr = parse_double(v); }},
           {"warmup_steps",
            [](RunConfig& c, const std::string& v) { c.train.schedule.warmup_steps = parse_size(v); }},
           {"schedule_dim", [](RunConfig& c, const std::string& v) { c.train.schedule.model_dim = parse_double(v); }},
           {"beta1", [](RunConfig& c, const std::string& v) { c.train.adam.beta1 = parse_double(v); }},
           {"beta2", [](RunConfig& c, const std::string& v) { c.train.adam.beta2 = parse_double(v); }},
           {"epsilon", [](RunConfig& c, const std::string& v) { c.train.adam.epsilon = parse_double(v); }},
           {"clip_norm", [](RunConfig& c, const std::string& v) { c.train.clip_norm = parse_double(v); }},
           {"max_steps", [](RunConfig& c, const std::string& v) { c.train.max_steps = parse_size(v); }},
           {"seed", [](RunConfig& c, const std::string& v) { c.train.seed = parse_size(v); }},
       }},
      {"data",
       {
           {"train_manifest", [](RunConfig& c, const std::string& v) { c.data.train_manifest = v; }},
           {"test_manifest", [](RunConfig& c, const std::string& v) { c.data.test_manifest = v; }},
           {"cmvn", [](RunConfig& c, const std::string& v) { c.data.cmvn = parse_bool(v); }},
       }},
      {"vocab",
       {
           {"symbols", [](RunConfig& c, const std::string& v) { c.vocab = split_ws(v); }},
       }},
  };
  return table;
}

}  // namespace

TrainConfig RunConfig::resolved_train() const {
  TrainConfig t = train;
  t.schedule.kind = schedule.value_or(default_schedule(model.variant));
  return t;
}

RunConfig parse_config(const std::string& text) {
  RunConfig config;
  config.model.vocab_size = 0;
  std::istringstream in(text);
  std::string section;
  std::size_t line_no = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (!setters().contains(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& keys = setters().at(section);
    const auto it = keys.find(key);
    if (it == keys.end()) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
    try {
      it->second(config, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  try {
    config.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid [train] section: ") + e.what());
  }
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string format_model_section(const ModelConfig& m) {
  std::ostringstream out;
  const auto& ch = m.conv_channels;
  const auto& a = m.freq_attention;
  out << "[model]\n"
      << "variant = " << to_string(m.variant) << '\n'
      << "conv_channels = " << ch[0] << ',' << ch[1] << ',' << ch[2] << ',' << ch[3] << '\n'
      << "kernel_size = " << m.kernel_size << '\n'
      << "bilstm_hidden = " << m.bilstm_hidden << '\n'
      << "vocab_size = " << m.vocab_size << '\n'
      << "feature_dim = " << m.feature_dim << '\n'
      << "dropout = " << format_double(m.dropout) << '\n'
      << "attn_layers = " << a.n_layers << '\n'
      << "attn_heads = " << a.n_heads << '\n'
      << "d_model = " << a.d_model << '\n'
      << "d_ff = " << a.d_ff << '\n'
      << "attn_dropout = " << format_double(a.dropout) << '\n'
      << "positional_encoding = " << (a.positional_encoding ? "true" : "false") << '\n'
      << "identity_encoder = " << (a.identity ? "true" : "false") << '\n';
  return out.str();
}

std::string format_config(const RunConfig& c) {
  std::ostringstream out;
  out << format_model_section(c.model) << '\n';
  const auto& t = c.train;
  out << "[train]\n"
      << "epochs = " << t.epochs << '\n'
      << "batch_size = " << t.batch_size << '\n'
      << "lr_schedule = " << (c.schedule ? to_string(*c.schedule) : std::string("auto")) << '\n'
      << "learning_rate = " << format_double(t.schedule.constant_lr) << '\n'
      << "warmup_steps = " << t.schedule.warmup_steps << '\n'
      << "schedule_dim = " << format_double(t.schedule.model_dim) << '\n'
      << "beta1 = " << format_double(t.adam.beta1) << '\n'
      << "beta2 = " << format_double(t.adam.beta2) << '\n'
      << "epsilon = " << format_double(t.adam.epsilon) << '\n'
      << "clip_norm = " << format_double(t.clip_norm) << '\n'
      << "max_steps = " << t.max_steps << '\n'
      << "seed = " << t.seed << "\n\n";
  out << "[data]\n"
      << "train_manifest = " << c.data.train_manifest << '\n'
      << "test_manifest = " << c.data.test_manifest << '\n'
      << "cmvn = " << (c.data.cmvn ? "true" : "false") << '\n';
  if (!c.vocab.empty()) {
    out << "\n[vocab]\nsymbols =";
    for (const auto& s : c.vocab) out << ' ' << s;
    out << '\n';
  }
  return out.str();
}

}  // namespace fqa
