#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>

#include "fedchat/fedsim.hpp"
#include "fedchat/ingest.hpp"
#include "fedchat/metrics.hpp"
#include "fedchat/peft.hpp"
#include "fedchat/retrieval.hpp"
#include "fedchat/service.hpp"

namespace py = pybind11;
using namespace fedchat;

namespace {

struct Model {
  ParamSet params;
  tinylm::ModelConfig config;
};

py::dict block_dict(const ingest::Block& b) {
  py::dict d;
  d["block_id"] = b.block_id;
  d["doc_id"] = b.doc_id;
  d["seq"] = b.seq;
  d["header"] = b.header;
  d["text"] = b.text;
  d["byte_span"] = py::make_tuple(b.span_start, b.span_end);
  d["keywords"] = b.metadata.keywords;
  d["char_count"] = b.metadata.char_count;
  d["created_at"] = b.metadata.created_at;
  return d;
}

retrieval::EmbeddingIndex to_index(std::vector<std::string> ids, const std::vector<std::vector<float>>& rows,
                                   const std::string& metric) {
  const std::size_t d = rows.empty() ? 0 : rows.front().size();
  std::vector<float> flat;
  flat.reserve(rows.size() * d);
  for (const auto& r : rows) {
    if (r.size() != d) throw Error(ErrorCode::kDimensionMismatch, "rows must share one dimension");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return retrieval::make_index(std::move(ids), d, std::move(flat), retrieval::parse_metric(metric));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "fedchat core bindings";

  auto error = py::register_exception<Error>(m, "FedchatError", PyExc_RuntimeError);
  (void)error;

  py::class_<Model>(m, "Model")
      .def_static("load",
                  [](const std::string& path) {
                    auto [params, config] = tinylm::load_model(path);
                    return Model{std::move(params), config};
                  })
      .def_static("init",
                  [](std::uint64_t seed) {
                    tinylm::ModelConfig c;
                    c.seed = seed;
                    return Model{tinylm::init_params(c), c};
                  },
                  py::arg("seed") = 0)
      .def("save", [](const Model& self, const std::string& path) { tinylm::save_model(path, self.params, self.config); })
      .def("generate",
           [](const Model& self, const std::string& prompt, int max_new) {
             py::gil_scoped_release release;
             return tinylm::generate(self.params, self.config, prompt, max_new);
           },
           py::arg("prompt"), py::arg("max_new") = 32)
      .def("embed", [](const Model& self, const std::string& text) { return tinylm::embed_text(self.params, self.config, text); })
      .def("loss",
           [](const Model& self, const std::vector<std::string>& documents, int seq_len) {
             return fedsim::eval_loss(self.params, self.config, documents, seq_len);
           },
           py::arg("documents"), py::arg("seq_len") = 64)
      .def("param_stats",
           [](const Model& self) {
             const auto s = peft::param_stats(self.params);
             py::dict d;
             d["total_params"] = s.total_params;
             d["trainable_params"] = s.trainable_params;
             d["trainable_percent"] = s.trainable_percent;
             d["model_bytes"] = s.model_bytes;
             d["trainable_bytes"] = s.trainable_bytes;
             return d;
           })
      .def("with_lora",
           [](const Model& self, int rank, float alpha) {
             auto a = peft::attach_lora(self.params, self.config, peft::default_lora_targets(self.config), rank, alpha);
             return Model{std::move(a.params), a.config};
           },
           py::arg("rank") = 4, py::arg("alpha") = 8.0f)
      .def_property_readonly("context_len", [](const Model& self) { return self.config.context_len; })
      .def_property_readonly("d_model", [](const Model& self) { return self.config.d_model; });

  m.def("tokenize", [](const std::string& text) { return tinylm::Tokenizer::tokenize(text, {}); });
  m.def("detokenize", [](const std::vector<tinylm::TokenId>& ids) { return tinylm::Tokenizer::detokenize(ids); });

  m.def("rouge_n",
        [](const std::string& candidate, const std::string& reference, int n) {
          const auto s = evalmetrics::rouge_n(evalmetrics::metric_tokens(candidate), evalmetrics::metric_tokens(reference), n);
          return py::make_tuple(s.precision, s.recall, s.f1);
        },
        py::arg("candidate"), py::arg("reference"), py::arg("n") = 1);
  m.def("rouge_l", [](const std::string& candidate, const std::string& reference) {
    const auto s = evalmetrics::rouge_l(evalmetrics::metric_tokens(candidate), evalmetrics::metric_tokens(reference));
    return py::make_tuple(s.precision, s.recall, s.f1);
  });
  m.def("bleu",
        [](const std::string& candidate, const std::vector<std::string>& references, int max_n) {
          std::vector<evalmetrics::Tokens> refs;
          for (const auto& r : references) refs.push_back(evalmetrics::metric_tokens(r));
          return evalmetrics::bleu(evalmetrics::metric_tokens(candidate), refs, max_n).score;
        },
        py::arg("candidate"), py::arg("references"), py::arg("max_n") = 4);

  m.def("parse_blocks",
        [](const std::string& text, const std::string& source_uri, const std::string& fetched_at) {
          py::list out;
          for (const auto& b : ingest::parse_blocks(ingest::make_document(text, source_uri, fetched_at))) {
            out.append(block_dict(b));
          }
          return out;
        },
        py::arg("text"), py::arg("source_uri") = "mem://python", py::arg("fetched_at") = "1970-01-01T00:00:00Z");
  m.def("ingest",
        [](const std::string& source, const std::string& corpus_dir) {
          ingest::Corpus corpus;
          if (std::filesystem::exists(std::filesystem::path(corpus_dir) / "corpus.jsonl")) corpus = ingest::load_corpus(corpus_dir);
          const std::size_t before = corpus.blocks.size();
          corpus = ingest::add_documents(corpus, ingest::read_sources(source));
          ingest::persist_corpus(corpus, corpus_dir);
          return corpus.blocks.size() - before;
        },
        py::arg("source"), py::arg("corpus_dir"));
  m.def("load_blocks", [](const std::string& corpus_dir) {
    py::list out;
    for (const auto& b : ingest::load_corpus(corpus_dir).blocks) out.append(block_dict(b));
    return out;
  });

  m.def("nn_search",
        [](std::vector<std::string> ids, const std::vector<std::vector<float>>& rows, const std::vector<float>& query,
           std::size_t k, const std::string& metric) {
          std::vector<std::pair<std::string, double>> out;
          for (const auto& r : retrieval::nn_search(to_index(std::move(ids), rows, metric), query, k)) {
            out.emplace_back(r.block_id, r.score);
          }
          return out;
        },
        py::arg("ids"), py::arg("rows"), py::arg("query"), py::arg("k"), py::arg("metric") = "cosine");

  m.def("quantize_roundtrip", [](const std::vector<float>& values) {
    ParamSet p;
    Tensor t({values.size()});
    t.data = values;
    p.insert("x", std::move(t), true);
    const auto q = fedsim::quantize(p);
    return py::make_tuple(fedsim::dequantize(q).at("x").data, q.tensors[0].scale);
  });

  py::class_<service::ChatService>(m, "ChatService")
      .def(py::init([](const std::string& config_json) {
        return std::make_unique<service::ChatService>(service::ServiceConfig::from_json(config_json));
      }))
      .def("load", &service::ChatService::load, py::call_guard<py::gil_scoped_release>())
      .def("ready", &service::ChatService::ready)
      .def("ask",
           [](const service::ChatService& self, const std::string& body) {
             py::gil_scoped_release release;
             const auto r = self.handle_ask(body);
             return std::make_pair(r.status, r.body);
           })
      .def("ingest",
           [](service::ChatService& self, const std::string& body) {
             py::gil_scoped_release release;
             const auto r = self.handle_ingest(body);
             return std::make_pair(r.status, r.body);
           })
      .def("health", [](const service::ChatService& self) {
        const auto r = self.handle_health();
        return std::make_pair(r.status, r.body);
      });
}
