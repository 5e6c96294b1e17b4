#include "dmrc/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dmrc {

namespace {

using nlohmann::json;

bool is_word_char(unsigned char c) { return std::isalnum(c) != 0; }

// Deterministic draws independent of stdlib distribution internals.
int rint(std::mt19937_64& rng, int k) { return static_cast<int>(rng() % static_cast<uint64_t>(k)); }
double rreal(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

}  // namespace

std::vector<std::pair<std::string, std::pair<int, int>>> tokenize_with_offsets(
    const std::string& text) {
  std::vector<std::pair<std::string, std::pair<int, int>>> out;
  const int len = static_cast<int>(text.size());
  int i = 0;
  while (i < len) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (is_word_char(c)) {
      int j = i;
      std::string w;
      while (j < len && is_word_char(static_cast<unsigned char>(text[j]))) {
        w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[j]))));
        ++j;
      }
      out.push_back({std::move(w), {i, j}});
      i = j;
    } else {
      out.push_back({std::string(1, static_cast<char>(std::tolower(c))), {i, i + 1}});
      ++i;
    }
  }
  return out;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  for (auto& [w, off] : tokenize_with_offsets(text)) out.push_back(std::move(w));
  return out;
}

std::string canonicalize_speaker(const std::string& name) {
  size_t b = name.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = name.find_last_not_of(" \t\r\n");
  std::string out = name.substr(b, e - b + 1);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

Utterance make_utterance(const std::string& speaker, const std::string& text) {
  Utterance u;
  u.speaker = canonicalize_speaker(speaker);
  u.text = text;
  for (auto& [w, off] : tokenize_with_offsets(text)) {
    u.words.push_back(w);
    u.word_offsets.push_back(off);
  }
  if (u.speaker.empty()) throw DataError("utterance with empty speaker name");
  if (u.words.empty()) throw DataError("utterance with no words");
  return u;
}

int Dialogue::num_distinct_speakers() const {
  std::set<std::string> s;
  for (const auto& u : utterances) s.insert(u.speaker);
  return static_cast<int>(s.size());
}

Vocabulary build_vocabulary(const Corpus& corpus, size_t max_size) {
  std::map<std::string, long> freq;
  for (const auto& d : corpus.dialogues)
    for (const auto& u : d.utterances) {
      for (const auto& w : u.words) ++freq[w];
      for (const auto& w : tokenize(u.speaker)) ++freq[w];
    }
  for (const auto& item : corpus.items)
    for (const auto& w : item.question.tokens) ++freq[w];
  freq.erase(":");

  Vocabulary v;
  v.id_to_word = {"[CLS]", "[SEP]", "[UNK]", "[PAD]", ":"};
  std::vector<std::pair<std::string, long>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [w, f] : ranked) {
    if (v.id_to_word.size() >= max_size) break;
    v.id_to_word.push_back(w);
  }
  for (size_t i = 0; i < v.id_to_word.size(); ++i)
    v.word_to_id[v.id_to_word[i]] = static_cast<int>(i);
  return v;
}

PackedInput pack(const Dialogue& dialogue, const Question& question, const Vocabulary& vocab,
                 int max_len) {
  if (dialogue.utterances.empty()) throw DataError("pack: dialogue with no utterances");
  PackedInput p;
  p.token_ids.push_back(vocab.cls_id);
  for (const auto& q : question.tokens) p.token_ids.push_back(vocab.id(q));
  p.sep_positions.push_back(static_cast<int>(p.token_ids.size()));
  p.token_ids.push_back(vocab.sep_id);
  for (int k = 0; k < dialogue.num_utterances(); ++k) {
    const Utterance& u = dialogue.utterances[k];
    const auto name_tokens = tokenize(u.speaker);
    const int name_start = static_cast<int>(p.token_ids.size());
    for (const auto& w : name_tokens) p.token_ids.push_back(vocab.id(w));
    p.speaker_name_spans.push_back({name_start, static_cast<int>(p.token_ids.size()) - 1});
    p.token_ids.push_back(vocab.colon_id);
    for (int w = 0; w < static_cast<int>(u.words.size()); ++w) {
      p.context_token_positions.push_back(static_cast<int>(p.token_ids.size()));
      p.token_to_utterance.push_back(k);
      p.context_token_source.push_back({k, w});
      p.token_ids.push_back(vocab.id(u.words[w]));
    }
    p.sep_positions.push_back(static_cast<int>(p.token_ids.size()));
    p.token_ids.push_back(vocab.sep_id);
  }
  if (p.length() > max_len)
    throw DataError("pack: sequence length " + std::to_string(p.length()) + " exceeds max " +
                    std::to_string(max_len) + " (split the context first)");
  return p;
}

std::optional<int> key_utterance_target(const std::optional<AnswerSpan>& span) {
  if (!span) return std::nullopt;
  return span->utterance_index;
}

std::vector<int> speaker_targets(const Dialogue& dialogue, int m) {
  const int n = dialogue.num_utterances();
  if (m < 0 || m >= n) throw DataError("speaker_targets: m out of range");
  std::vector<int> out;
  for (int i = 0; i < n; ++i) {
    if (i == m) continue;
    out.push_back(dialogue.utterances[i].speaker == dialogue.utterances[m].speaker ? 1 : 0);
  }
  return out;
}

int choose_masked_utterance(const Dialogue& dialogue, std::mt19937_64& rng) {
  const int n = dialogue.num_utterances();
  if (n < 2) throw DataError("speaker task inapplicable: dialogue has a single utterance");
  return rint(rng, n);
}

std::string span_text(const Dialogue& dialogue, const PackedInput& packed, int start, int end) {
  if (start < 0 || end < start || end >= packed.num_context_tokens())
    throw DataError("span_text: bad span");
  std::string out;
  int k = start;
  while (k <= end) {
    const auto [u, w0] = packed.context_token_source[k];
    int k2 = k;
    while (k2 + 1 <= end && packed.context_token_source[k2 + 1].first == u) ++k2;
    const auto [u2, w1] = packed.context_token_source[k2];
    const auto& utt = dialogue.utterances[u];
    if (!out.empty()) out += " ";
    out += utt.text.substr(utt.word_offsets[w0].first,
                           utt.word_offsets[w1].second - utt.word_offsets[w0].first);
    k = k2 + 1;
  }
  return out;
}

namespace {

std::string joined_context(const std::vector<std::pair<std::string, std::string>>& raw,
                           std::vector<int>* text_starts) {
  std::string joined;
  for (size_t i = 0; i < raw.size(); ++i) {
    if (i) joined += "\n";
    joined += raw[i].first + ": ";
    if (text_starts) text_starts->push_back(static_cast<int>(joined.size()));
    joined += raw[i].second;
  }
  return joined;
}

}  // namespace

Corpus load_squad_style(const std::string& path, bool strict, std::vector<std::string>* warnings) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  json root;
  try {
    in >> root;
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path + ": " + e.what());
  }
  auto complain = [&](const std::string& id, const std::string& msg) {
    const std::string full = "record " + id + ": " + msg;
    if (strict) throw DataError(full);
    if (warnings) warnings->push_back(full);
  };

  Corpus corpus;
  if (!root.contains("data") || !root["data"].is_array()) throw DataError("missing data array");
  int para_counter = 0;
  for (const auto& article : root["data"]) {
    for (const auto& para : article.value("paragraphs", json::array())) {
      const std::string did = para.value("id", "p" + std::to_string(para_counter));
      ++para_counter;
      if (!para.contains("context") || !para["context"].is_array()) {
        complain(did, "context must be a list of {speaker, text} objects");
        continue;
      }
      std::vector<std::pair<std::string, std::string>> raw;
      Dialogue dialogue;
      dialogue.id = did;
      bool bad = false;
      for (const auto& uj : para["context"]) {
        try {
          raw.push_back({uj.at("speaker").get<std::string>(), uj.at("text").get<std::string>()});
          dialogue.utterances.push_back(make_utterance(raw.back().first, raw.back().second));
        } catch (const std::exception& e) {
          complain(did, std::string("bad utterance: ") + e.what());
          bad = true;
          break;
        }
      }
      if (bad || dialogue.utterances.empty()) {
        if (dialogue.utterances.empty() && !bad) complain(did, "empty context");
        continue;
      }
      std::vector<int> text_starts;
      const std::string joined = joined_context(raw, &text_starts);
      // Cumulative context-token offset of each utterance.
      std::vector<int> cum{0};
      for (const auto& u : dialogue.utterances)
        cum.push_back(cum.back() + static_cast<int>(u.words.size()));

      const int dlg_index = static_cast<int>(corpus.dialogues.size());
      corpus.dialogues.push_back(dialogue);
      for (const auto& qj : para.value("qas", json::array())) {
        const std::string qid = qj.value("id", did + "-q?");
        Question q;
        q.id = qid;
        try {
          q.tokens = tokenize(qj.at("question").get<std::string>());
        } catch (const std::exception& e) {
          complain(qid, std::string("bad question: ") + e.what());
          continue;
        }
        const bool impossible = qj.value("is_impossible", false);
        bool ok = true;
        if (!impossible) {
          for (const auto& aj : qj.value("answers", json::array())) {
            std::string atext;
            int astart = -1;
            try {
              atext = aj.at("text").get<std::string>();
              astart = aj.at("answer_start").get<int>();
            } catch (const std::exception& e) {
              complain(qid, std::string("bad answer: ") + e.what());
              ok = false;
              break;
            }
            if (astart < 0 || astart + atext.size() > joined.size() ||
                joined.compare(astart, atext.size(), atext) != 0) {
              complain(qid, "answer text not found at stated offset");
              ok = false;
              break;
            }
            // Locate the utterance whose text segment contains the offset.
            int u = -1;
            for (int k = 0; k < dialogue.num_utterances(); ++k) {
              const int tstart = text_starts[k];
              const int tend = tstart + static_cast<int>(raw[k].second.size());
              if (astart >= tstart && astart < tend) {
                u = k;
                break;
              }
            }
            if (u < 0) {
              complain(qid, "answer offset points at a speaker label, not utterance text");
              ok = false;
              break;
            }
            const int local_start = astart - text_starts[u];
            const int local_end = local_start + static_cast<int>(atext.size());
            const auto& offs = dialogue.utterances[u].word_offsets;
            int w0 = -1, w1 = -1;
            for (int w = 0; w < static_cast<int>(offs.size()); ++w) {
              if (offs[w].second > local_start && offs[w].first < local_end) {
                if (w0 < 0) w0 = w;
                w1 = w;
              }
            }
            if (w0 < 0) {
              complain(qid, "answer span covers no tokens");
              ok = false;
              break;
            }
            AnswerSpan span;
            span.utterance_index = u;
            span.start_token = cum[u] + w0;
            span.end_token = cum[u] + w1;
            span.text = atext;
            q.gold_answers.push_back(span);
            q.gold_texts.push_back(atext);
          }
          if (ok && q.gold_answers.empty()) {
            complain(qid, "answerable question without answers");
            ok = false;
          }
        }
        if (!ok) continue;
        q.answerable = !q.gold_answers.empty();
        corpus.items.push_back({dlg_index, std::move(q)});
      }
    }
  }
  return corpus;
}

void write_corpus_json(const Corpus& corpus, const std::string& path) {
  json data = json::array();
  json paragraphs = json::array();
  for (size_t di = 0; di < corpus.dialogues.size(); ++di) {
    const Dialogue& d = corpus.dialogues[di];
    std::vector<std::pair<std::string, std::string>> raw;
    for (const auto& u : d.utterances) raw.push_back({u.speaker, u.text});
    std::vector<int> text_starts;
    joined_context(raw, &text_starts);
    std::vector<int> cum{0};
    for (const auto& u : d.utterances)
      cum.push_back(cum.back() + static_cast<int>(u.words.size()));

    json ctx = json::array();
    for (const auto& u : d.utterances) ctx.push_back({{"speaker", u.speaker}, {"text", u.text}});
    json qas = json::array();
    for (const auto& item : corpus.items) {
      if (item.dialogue_index != static_cast<int>(di)) continue;
      const Question& q = item.question;
      json answers = json::array();
      for (const auto& span : q.gold_answers) {
        const int u = span.utterance_index;
        const int w0 = span.start_token - cum[u];
        const int w1 = span.end_token - cum[u];
        const auto& utt = d.utterances[u];
        const int astart = text_starts[u] + utt.word_offsets[w0].first;
        answers.push_back(
            {{"text", utt.text.substr(utt.word_offsets[w0].first,
                                      utt.word_offsets[w1].second - utt.word_offsets[w0].first)},
             {"answer_start", astart}});
      }
      std::string qtext;
      for (const auto& t : q.tokens) {
        if (!qtext.empty()) qtext += " ";
        qtext += t;
      }
      qas.push_back({{"id", q.id},
                     {"question", qtext},
                     {"answers", answers},
                     {"is_impossible", !q.answerable}});
    }
    paragraphs.push_back({{"id", d.id}, {"context", ctx}, {"qas", qas}});
  }
  data.push_back({{"title", "corpus"}, {"paragraphs", paragraphs}});
  json root = {{"version", "v1.0"}, {"data", data}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << root.dump(1) << "\n";
}

namespace {

const std::vector<std::string> kNamePool = {"alice", "bob",   "carol", "dave", "erin",
                                            "frank", "grace", "heidi", "ivan"};

const std::vector<std::string> kTopicPool = {
    "apples",  "trains",   "rivers",  "music",    "chess",    "coffee",  "gardens", "books",
    "stars",   "bridges",  "pianos",  "castles",  "lanterns", "forests", "engines", "candles",
    "violins", "mirrors",  "clocks",  "islands",  "kites",    "ladders", "magnets", "needles",
    "oranges", "pillows",  "quilts",  "ribbons",  "saddles",  "teapots", "umbrellas", "wagons",
    "anchors", "baskets",  "cameras", "drums",    "easels",   "feathers", "globes",  "hammers",
    "icicles", "jackets",  "kettles", "lemons",   "marbles",  "napkins", "owls",     "pebbles",
    "quivers", "rockets",  "shells",  "tunnels",  "urns",     "vases",   "whistles", "xylophones",
    "yachts",  "zippers",  "acorns",  "beacons"};

std::string join_words(const std::vector<std::string>& w) {
  std::string out;
  for (const auto& s : w) {
    if (!out.empty()) out += " ";
    out += s;
  }
  return out;
}

}  // namespace

Corpus generate_synthetic(const SyntheticConfig& cfg, std::mt19937_64& rng) {
  if (cfg.num_speakers < 2 || cfg.num_speakers > static_cast<int>(kNamePool.size()))
    throw DataError("synthetic: num_speakers must be in [2, " +
                    std::to_string(kNamePool.size()) + "]");
  if (cfg.num_topics < cfg.max_utterances + 1 ||
      cfg.num_topics > static_cast<int>(kTopicPool.size()))
    throw DataError("synthetic: num_topics must be in [max_utterances+1, " +
                    std::to_string(kTopicPool.size()) + "]");
  if (cfg.min_utterances < 2 || cfg.max_utterances < cfg.min_utterances)
    throw DataError("synthetic: bad utterance count range");

  Corpus corpus;
  long q_global = 0;
  auto unanswerable_mark = [&](long q) {
    return static_cast<long>(static_cast<double>(q + 1) * cfg.unanswerable_fraction) !=
           static_cast<long>(static_cast<double>(q) * cfg.unanswerable_fraction);
  };

  for (int di = 0; di < cfg.num_dialogues; ++di) {
    const int K = cfg.min_utterances + rint(rng, cfg.max_utterances - cfg.min_utterances + 1);
    const int pool = 2 + rint(rng, std::min(cfg.num_speakers, K) - 1);
    std::vector<int> speaker_ids(static_cast<size_t>(pool));
    {
      std::vector<int> all(kNamePool.size());
      for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
      for (int i = 0; i < pool; ++i) {
        const int j = i + rint(rng, cfg.num_speakers - i);
        std::swap(all[i], all[j]);
        speaker_ids[static_cast<size_t>(i)] = all[i];
      }
    }
    std::vector<int> topic_ids(kTopicPool.size());
    for (size_t i = 0; i < topic_ids.size(); ++i) topic_ids[i] = static_cast<int>(i);
    for (int i = 0; i < cfg.num_topics; ++i) {
      const int j = i + rint(rng, cfg.num_topics - i);
      std::swap(topic_ids[i], topic_ids[j]);
    }

    Dialogue d;
    d.id = "syn" + std::to_string(di);
    std::vector<int> utt_speaker(static_cast<size_t>(K));
    std::vector<int> utt_topic(static_cast<size_t>(K));
    std::vector<bool> intro(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
      const std::string& name = kNamePool[static_cast<size_t>(
          speaker_ids[static_cast<size_t>(rint(rng, pool))])];
      utt_speaker[static_cast<size_t>(k)] =
          static_cast<int>(std::find(kNamePool.begin(), kNamePool.end(), name) -
                           kNamePool.begin());
      const std::string& topic = kTopicPool[static_cast<size_t>(topic_ids[static_cast<size_t>(k)])];
      utt_topic[static_cast<size_t>(k)] = topic_ids[static_cast<size_t>(k)];
      std::vector<std::string> words;
      const bool in = rreal(rng) < cfg.introduce_prob;
      intro[static_cast<size_t>(k)] = in;
      // Every template is exactly five words, so utterances occupy a fixed
      // position grid and the learned absolute positions can bind each
      // utterance node to its own tokens (there are no segment embeddings).
      if (in)
        words = {"i", "am", name, "like", topic};
      else if (rint(rng, 2) == 0)
        words = {"you", "know", "i", "like", topic};
      else
        words = {"well", "i", "really", "enjoy", topic};
      d.utterances.push_back(make_utterance(name, join_words(words)));
    }
    std::vector<int> cum{0};
    for (const auto& u : d.utterances)
      cum.push_back(cum.back() + static_cast<int>(u.words.size()));

    const int dlg_index = static_cast<int>(corpus.dialogues.size());
    corpus.dialogues.push_back(d);

    for (int qi = 0; qi < cfg.questions_per_dialogue; ++qi, ++q_global) {
      Question q;
      q.id = d.id + "-q" + std::to_string(qi);
      if (unanswerable_mark(q_global)) {
        // Ask about a topic absent from this dialogue.
        const int t = topic_ids[static_cast<size_t>(K + rint(rng, cfg.num_topics - K))];
        q.tokens = {"did", "anyone", "mention", kTopicPool[static_cast<size_t>(t)]};
        q.answerable = false;
        corpus.items.push_back({dlg_index, std::move(q)});
        continue;
      }
      int type = rint(rng, 3);
      std::vector<int> intro_utts;
      for (int k = 0; k < K; ++k)
        if (intro[static_cast<size_t>(k)]) intro_utts.push_back(k);
      if (type == 0 && intro_utts.empty()) type = 1;
      if (type == 0) {
        const int k = intro_utts[static_cast<size_t>(rint(rng, static_cast<int>(intro_utts.size())))];
        q.tokens = {"who", "said", "the",
                    kTopicPool[static_cast<size_t>(utt_topic[static_cast<size_t>(k)])]};
        AnswerSpan s;
        s.utterance_index = k;
        s.start_token = cum[k] + 2;  // the name inside "i am <name> ..."
        s.end_token = s.start_token;
        s.text = d.utterances[static_cast<size_t>(k)].words[2];
        q.gold_texts.push_back(s.text);
        q.gold_answers.push_back(std::move(s));
      } else if (type == 1) {
        const int k = rint(rng, K);
        const std::string& name = d.utterances[static_cast<size_t>(k)].speaker;
        q.tokens = {"what", "did", name, "say"};
        for (int j = 0; j < K; ++j) {
          if (d.utterances[static_cast<size_t>(j)].speaker != name) continue;
          AnswerSpan s;
          s.utterance_index = j;
          s.start_token = cum[j + 1] - 1;  // topic is the last word
          s.end_token = s.start_token;
          s.text = d.utterances[static_cast<size_t>(j)].words.back();
          q.gold_texts.push_back(s.text);
          q.gold_answers.push_back(std::move(s));
        }
      } else {
        const int k = rint(rng, K);
        q.tokens = {"which", "utterance", "mentions",
                    kTopicPool[static_cast<size_t>(utt_topic[static_cast<size_t>(k)])]};
        AnswerSpan s;
        s.utterance_index = k;
        s.start_token = cum[k];
        s.end_token = cum[k + 1] - 1;
        s.text = d.utterances[static_cast<size_t>(k)].text;
        q.gold_texts.push_back(s.text);
        q.gold_answers.push_back(std::move(s));
      }
      q.answerable = true;
      corpus.items.push_back({dlg_index, std::move(q)});
    }
  }
  return corpus;
}

}  // namespace dmrc
