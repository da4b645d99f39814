#include "geomatt/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace geomatt {

namespace {

std::string trim(const std::string &s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <class T> T parse_number(const std::string &key, const std::string &text) {
  T value{};
  const char *end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty())
    throw std::invalid_argument("config key " + key + ": cannot parse '" + text + "' as " +
                                (std::is_integral_v<T> ? "a non-negative integer" : "a number"));
  return value;
}

std::vector<int> parse_orders(const std::string &key, const std::string &text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) throw std::invalid_argument("config key " + key + " needs at least one order");
  return out;
}

using Setter = std::function<void(RunConfig &, const std::string &, const std::string &)>;

template <class T, class Field> Setter number(Field field) {
  return [field](RunConfig &c, const std::string &key, const std::string &v) {
    field(c) = parse_number<T>(key, v);
  };
}

const std::vector<std::pair<std::string, Setter>> &setters() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"f_v", number<std::size_t>([](RunConfig &c) -> auto & { return c.model.feature_dim; })},
      {"f_base", number<std::size_t>([](RunConfig &c) -> auto & { return c.model.base_inner_dim; })},
      {"n_layers", number<std::size_t>([](RunConfig &c) -> auto & { return c.model.layers; })},
      {"stream_orders",
       [](RunConfig &c, const std::string &k, const std::string &v) {
         c.model.stream_orders = parse_orders(k, v);
       }},
      {"gamma", number<double>([](RunConfig &c) -> auto & { return c.model.gamma; })},
      {"delta_d", number<double>([](RunConfig &c) -> auto & { return c.model.delta_d; })},
      {"d_max", number<double>([](RunConfig &c) -> auto & { return c.model.d_max; })},
      {"hidden", number<std::size_t>([](RunConfig &c) -> auto & { return c.model.hidden; })},
      {"rho", number<double>([](RunConfig &c) -> auto & { return c.train.rho; })},
      {"lr", number<double>([](RunConfig &c) -> auto & { return c.train.lr; })},
      {"lr_decay", number<double>([](RunConfig &c) -> auto & { return c.train.lr_decay; })},
      {"lr_decay_every",
       number<std::size_t>([](RunConfig &c) -> auto & { return c.train.lr_decay_every; })},
      {"epochs", number<std::size_t>([](RunConfig &c) -> auto & { return c.train.epochs; })},
      {"batch_size", number<std::size_t>([](RunConfig &c) -> auto & { return c.train.batch_size; })},
      {"seed", number<std::uint64_t>([](RunConfig &c) -> auto & { return c.train.seed; })},
      {"folds", number<std::size_t>([](RunConfig &c) -> auto & { return c.train.folds; })},
      {"fold", number<std::size_t>([](RunConfig &c) -> auto & { return c.train.fold; })},
      {"n_train", number<std::size_t>([](RunConfig &c) -> auto & { return c.train.n_train; })},
  };
  return table;
}

std::string shortest(double x) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

} // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
}

const std::vector<std::string> &run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto &[name, setter] : setters()) k.push_back(name);
    return k;
  }();
  return keys;
}

RunConfig parse_run_config(const std::string &text, RunConfig config) {
  std::stringstream in(text);
  std::string line;
  std::map<std::string, std::size_t> seen;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = "config line " + std::to_string(number);
    if (eq == std::string::npos) throw std::invalid_argument(where + ": expected key=value");
    const std::string key = trim(body.substr(0, eq)), value = trim(body.substr(eq + 1));
    const auto &table = setters();
    const auto it = std::find_if(table.begin(), table.end(),
                                 [&](const auto &entry) { return entry.first == key; });
    if (it == table.end()) throw std::invalid_argument(where + ": unknown config key '" + key + "'");
    if (const auto [prev, fresh] = seen.emplace(key, number); !fresh)
      throw std::invalid_argument(where + ": key '" + key + "' already set on line " +
                                  std::to_string(prev->second));
    it->second(config, key, value);
  }
  config.validate();
  return config;
}

RunConfig load_run_config(const std::string &path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::stringstream text;
  text << in.rdbuf();
  try {
    return parse_run_config(text.str(), std::move(base));
  } catch (const std::invalid_argument &e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

std::string format_run_config(const RunConfig &c) {
  std::string orders;
  for (int k : c.model.stream_orders) orders += (orders.empty() ? "" : ",") + std::to_string(k);
  std::ostringstream out;
  out << "f_v = " << c.model.feature_dim << "\n"
      << "f_base = " << c.model.base_inner_dim << "\n"
      << "n_layers = " << c.model.layers << "\n"
      << "stream_orders = " << orders << "\n"
      << "gamma = " << shortest(c.model.gamma) << "\n"
      << "delta_d = " << shortest(c.model.delta_d) << "\n"
      << "d_max = " << shortest(c.model.d_max) << "\n"
      << "hidden = " << c.model.hidden << "\n"
      << "rho = " << shortest(c.train.rho) << "\n"
      << "lr = " << shortest(c.train.lr) << "\n"
      << "lr_decay = " << shortest(c.train.lr_decay) << "\n"
      << "lr_decay_every = " << c.train.lr_decay_every << "\n"
      << "epochs = " << c.train.epochs << "\n"
      << "batch_size = " << c.train.batch_size << "\n"
      << "seed = " << c.train.seed << "\n"
      << "folds = " << c.train.folds << "\n"
      << "fold = " << c.train.fold << "\n"
      << "n_train = " << c.train.n_train << "\n";
  return out.str();
}

} // namespace geomatt
