#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "hmt/bleu.hpp"
#include "hmt/checkpoint.hpp"
#include "hmt/config.hpp"
#include "hmt/decode.hpp"
#include "hmt/error.hpp"
#include "hmt/hallucinator.hpp"
#include "hmt/optim.hpp"
#include "hmt/pipeline.hpp"
#include "hmt/text.hpp"
#include "hmt/vq.hpp"
#include "hmt/world.hpp"

namespace py = pybind11;
using namespace hmt;

namespace {

Tensor to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from_data(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<Words> split_all(const std::vector<std::string>& lines) {
  std::vector<Words> out;
  for (const auto& l : lines) out.push_back(split_words(l));
  return out;
}

}  // namespace

PYBIND11_MODULE(hallucmt, m) {
  m.doc() = "Bindings for the hallucination-assisted translation pipeline";

  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<Config>(m, "Config")
      .def(py::init<>())
      .def_static("load", &Config::load, py::arg("path"))
      .def("set", &Config::set, py::arg("key"), py::arg("value"))
      .def("get", &Config::get, py::arg("key"))
      .def("digest", &Config::digest)
      .def("dump", &Config::dump);
  m.def("config_keys", [] {
    std::vector<std::string> names;
    for (const auto& k : config_keys()) names.push_back(k.name);
    return names;
  });

  m.def("corpus_bleu",
        [](const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
          return corpus_bleu(split_all(hyps), split_all(refs));
        },
        py::arg("hypotheses"), py::arg("references"), "Corpus BLEU-4 over whitespace tokens, in [0, 100].");

  m.def("lr_at", [](std::int64_t step, double base_lr, std::int64_t warmup) { return lr_at(step, {base_lr, warmup}); },
        py::arg("step"), py::arg("base_lr"), py::arg("warmup"));
  m.def("anneal_tau",
        [](std::int64_t step, double tau0, double tau_min, double rate) {
          return anneal_tau(step, {tau0, tau_min, rate});
        },
        py::arg("step"), py::arg("tau0") = 5.0, py::arg("tau_min") = 0.1, py::arg("rate") = 1e-3);

  m.def("quantize",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& features,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& codebook) {
          return quantize(to_tensor(features), to_tensor(codebook));
        },
        py::arg("features"), py::arg("codebook"), "Nearest codebook row per feature row; ties to the lowest index.");

  m.def("gumbel_softmax",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& log_pi, double tau,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& noise) {
          NoTapeScope no_tape;
          return to_array(gumbel_softmax_sample(to_tensor(log_pi), tau, to_tensor(noise)));
        },
        py::arg("log_pi"), py::arg("tau"), py::arg("noise"));

  m.def("beam_search",
        [](const std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>&)>& scorer,
           int bos, int eos, std::size_t beam, double alpha, std::size_t max_len, const std::vector<int>& banned) {
          const Hypothesis h = beam_search(scorer, bos, eos, {beam, alpha, max_len}, banned);
          return py::make_tuple(h.tokens, h.score, h.truncated);
        },
        py::arg("scorer"), py::arg("bos"), py::arg("eos"), py::arg("beam") = 5, py::arg("alpha") = 1.0,
        py::arg("max_len") = 40, py::arg("banned") = std::vector<int>{},
        "scorer maps a list of prefixes to next-token log-probabilities. Returns (tokens, score, truncated).");

  m.def("generate_corpus",
        [](std::size_t n, std::uint64_t seed) {
          const Corpus c = generate_corpus(n, seed);
          py::dict out;
          for (const auto& [name, split] : {std::pair{"train", &c.train}, {"valid", &c.valid}, {"test", &c.test}}) {
            py::list rows;
            for (const auto& s : *split) {
              rows.append(py::dict(py::arg("source") = join_words(s.source), py::arg("target") = join_words(s.target),
                                   py::arg("spans") = s.spans));
            }
            out[name] = rows;
          }
          return out;
        },
        py::arg("n"), py::arg("seed") = 0, "Synthetic grounded corpus as {split: [{source, target, spans}]}.");

  py::class_<Tokenizer>(m, "Tokenizer")
      .def_static(
          "learn",
          [](const std::vector<std::string>& corpus, std::size_t merges) {
            BpeMerges rules = learn_bpe(corpus, merges);
            Vocabulary vocab = Vocabulary::build(corpus, rules);
            return Tokenizer(std::move(rules), std::move(vocab));
          },
          py::arg("corpus"), py::arg("merges"))
      .def("encode", &Tokenizer::encode, py::arg("sentence"))
      .def("decode", &Tokenizer::decode, py::arg("ids"))
      .def("__len__", [](const Tokenizer& t) { return t.vocab().size(); })
      .def("tokens", [](const Tokenizer& t) { return t.vocab().tokens(); });

  m.def("describe_checkpoint", [](const std::filesystem::path& p) { return describe_checkpoint(load_checkpoint(p)); },
        py::arg("path"));
  m.def("average_checkpoints",
        [](const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out) {
          std::vector<Checkpoint> cs;
          for (const auto& p : inputs) cs.push_back(load_checkpoint(p));
          save_checkpoint(out, average_checkpoints(cs));
        },
        py::arg("inputs"), py::arg("out"));

  m.def("train_stage",
        [](const std::string& stage, const Config& cfg, bool force) {
          StageOptions opt;
          opt.force = force;
          StageResult r;
          py::gil_scoped_release release;
          if (stage == "vae") r = train_vae_stage(cfg, opt);
          else if (stage == "halluc") r = train_halluc_stage(cfg, opt);
          else if (stage == "joint") r = train_joint_stage(cfg, opt);
          else if (stage == "textonly") r = train_textonly_stage(cfg, opt);
          else throw ConfigError("unknown stage '" + stage + "'");
          py::gil_scoped_acquire acquire;
          std::vector<double> losses;
          for (const auto& rec : r.records) losses.push_back(rec.total);
          return py::make_tuple(losses, r.last_checkpoint.string());
        },
        py::arg("stage"), py::arg("config"), py::arg("force") = false,
        "Runs one training stage. Returns (per-step losses, last checkpoint path).");
}
