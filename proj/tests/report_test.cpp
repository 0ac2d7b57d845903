#include <gtest/gtest.h>

#include <map>
#include <random>

#include "eabss/report.hpp"
#include "eabss/session.hpp"
#include "test_support.hpp"

using namespace eabss;
using namespace eabss::report;
using eabss::testing::code_of;
using eabss::testing::words;

namespace {

const std::vector<std::string> kActors = {"Visitor", "Educator", "Administrator", "Technician"};

std::vector<gateway::FixtureEntry> museum_fixture() {
  return gateway::parse_fixture(config::read_file(eabss::testing::data_path("fixtures/museum_replay.jsonl")));
}

session::SessionState replay(std::vector<gateway::FixtureEntry> entries) {
  gateway::Gateway gw(std::make_shared<gateway::ReplayBackend>(std::move(entries)), [](auto) {});
  auto s = session::start_session(eabss::testing::museum_doc(), session::BackendDescriptor{"replay", "", "", "", ""},
                                  gateway::GenerationParams{});
  session::run(s, gw);
  return s;
}

const session::SessionState& museum() {
  static const session::SessionState s = replay(museum_fixture());
  return s;
}

std::string key_value(const std::string& key) { return museum().keys.at(key).value; }

// The scope table with the rows of one category removed (grouped cells
// are refilled first so deletion does not shift rows into another group).
PlainTable without_category(PlainTable t, const std::string& name) {
  auto cat = *t.column("category");
  std::string last;
  for (auto& r : t.rows) {
    if (r[cat].empty()) r[cat] = last;
    last = r[cat];
  }
  std::erase_if(t.rows, [&](const std::vector<std::string>& r) { return text::contains_icase(r[cat], name); });
  return t;
}

std::vector<std::string> rules(const std::vector<Finding>& fs) {
  std::vector<std::string> out;
  for (const auto& f : fs) out.push_back(f.rule);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tables

TEST(Table, PublishedScopeTable) {
  auto t = parse_plain_table(key_value("key-modelScope"));
  EXPECT_EQ(t.header, (std::vector<std::string>{"Category", "Sub-Category", "Explanation", "Justification"}));
  EXPECT_EQ(t.rows.size(), 15u);
  EXPECT_EQ(t.rows[0][1], "Visitor");
}

TEST(Table, PipeTableWithProse) {
  auto t = parse_plain_table("Here it is:\n| A | B |\n| --- | --- |\n| 1 | 2 |\n| 3 | 4 |\nDone.");
  EXPECT_EQ(t.header, (std::vector<std::string>{"A", "B"}));
  EXPECT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.prose, (std::vector<std::string>{"Here it is:", "Done."}));
}

TEST(Table, ColumnAlignedTable) {
  auto t = parse_plain_table("Name    Scale\nTraffic    Nominal\nLayout    Ordinal\n");
  EXPECT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[1][1], "Ordinal");
}

TEST(Table, Errors) {
  EXPECT_EQ(code_of([] { parse_plain_table("| A | B | C |\n| 1 | 2 |\n"); }), ErrorCode::RaggedRow);
  EXPECT_EQ(code_of([] { parse_plain_table("just some prose without any delimiters"); }), ErrorCode::NoTableFound);
}

TEST(Table, MultipleTables) {
  auto ts = parse_plain_tables(key_value("key-categorisationSchemata"));
  EXPECT_EQ(ts.size(), 4u);
  for (const auto& t : ts) EXPECT_EQ(t.rows.size(), 3u);
}

TEST(Table, MarkdownRendersEveryRow) {
  auto md = to_markdown(parse_plain_table(key_value("key-modelScope")));
  auto lines = text::split_lines(md);
  std::size_t pipe_rows = std::count_if(lines.begin(), lines.end(), [](const std::string& l) { return l.rfind("|", 0) == 0; });
  EXPECT_EQ(pipe_rows, 15u + 2u);  // header and separator
}

// ---------------------------------------------------------------------------
// Scope

TEST(Scope, PublishedTableHasNoFindings) {
  EXPECT_TRUE(check_scope_table(parse_plain_table(key_value("key-modelScope")), kActors).empty());
}

TEST(Scope, DeletedMiscRowsGiveTwoFindings) {
  auto t = without_category(parse_plain_table(key_value("key-modelScope")), "misc");
  auto fs = check_scope_table(t, kActors);
  EXPECT_EQ(rules(fs), (std::vector<std::string>{"scope-row-count", "scope-category-min"}));
  EXPECT_EQ(fs[1].subject, "Misc");
}

TEST(Scope, MissingActorAndDuplicateSubCategory) {
  auto t = parse_plain_table(key_value("key-modelScope"));
  auto fs = check_scope_table(t, {"Visitor", "Curator"});
  EXPECT_EQ(rules(fs), (std::vector<std::string>{"scope-actor"}));
  t.rows.back()[1] = "Visitor";
  EXPECT_EQ(rules(check_scope_table(t, kActors)), (std::vector<std::string>{"scope-duplicate"}));
  EXPECT_EQ(rules(check_scope_table(PlainTable{{"X", "Y"}, {{"a", "b"}}, {}})), (std::vector<std::string>{"scope-columns"}));
}

TEST(Scope, ShufflesMatchACountingOracle) {
  std::mt19937 rng(9);
  const std::vector<std::string> names = {"Actor", "Physical Environment", "Social Aspects", "Psychological Aspects", "Misc"};
  for (int trial = 0; trial < 300; ++trial) {
    std::uniform_int_distribution<std::size_t> n_d(8, 18), c_d(0, names.size() - 1);
    PlainTable t{{"Category", "Sub-Category", "Explanation", "Justification"}, {}, {}};
    std::map<std::string, int> counts;
    std::size_t n = n_d(rng);
    for (std::size_t i = 0; i < n; ++i) {
      auto c = names[c_d(rng)];
      ++counts[c];
      t.rows.push_back({c, "Item" + std::to_string(i), "e", "j"});
    }
    std::set<std::string> expected;
    if (n != 15) expected.insert("scope-row-count");
    for (std::size_t k = 1; k < names.size(); ++k)
      if (counts[names[k]] < 2) expected.insert("scope-category-min:" + names[k]);
    std::set<std::string> got;
    for (const auto& f : check_scope_table(t)) {
      if (f.rule == "scope-category-min") {
        auto sc = scope_category(f.subject);
        ASSERT_TRUE(sc);
        for (const auto& nm : names)
          if (scope_category(nm) == sc) got.insert("scope-category-min:" + nm);
      } else {
        got.insert(f.rule);
      }
    }
    ASSERT_EQ(got, expected);
  }
}

// ---------------------------------------------------------------------------
// Factors

TEST(Factors, PublishedFactorsUseEachScaleOnce) {
  auto fs = parse_factors(key_value("key-experimentalFactors"));
  ASSERT_EQ(fs.size(), 3u);
  EXPECT_EQ(fs[0].name, "Visitor Traffic Patterns");
  EXPECT_EQ(fs[0].scale, Scale::Nominal);
  EXPECT_EQ(fs[1].scale, Scale::Ordinal);
  EXPECT_EQ(fs[2].name, "Content Personalization");
  EXPECT_EQ(fs[2].scale, Scale::Ratio);
  EXPECT_EQ(fs[0].value_range, "Low Traffic; Moderate Traffic; High Traffic");
  EXPECT_TRUE(check_factor_scales(fs).empty());
}

TEST(Factors, DuplicatedNominalIsOneFinding) {
  std::vector<ExperimentalFactor> fs = {{"A", Scale::Nominal, ""}, {"B", Scale::Nominal, ""}, {"C", Scale::Ratio, ""}};
  auto out = check_factor_scales(fs);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].rule, "scale-mix");
  EXPECT_NE(out[0].message.find("missing Ordinal"), std::string::npos);
  EXPECT_NE(out[0].message.find("duplicate Nominal"), std::string::npos);
}

TEST(Factors, WrongCountAndAmbiguousScale) {
  std::vector<ExperimentalFactor> four = {
      {"A", Scale::Nominal, ""}, {"B", Scale::Ordinal, ""}, {"C", Scale::Ratio, ""}, {"D", Scale::Ratio, ""}};
  EXPECT_EQ(rules(check_factor_scales(four)), (std::vector<std::string>{"factor-count"}));
  EXPECT_FALSE(scale_in("nominal or ordinal").has_value());
  EXPECT_FALSE(scale_in("a decoration").has_value());
  EXPECT_EQ(scale_in("Ratio scale"), Scale::Ratio);
}

TEST(Factors, PublishedCategorisationSchemata) {
  EXPECT_TRUE(check_categorisation(parse_plain_tables(key_value("key-categorisationSchemata")), 4).empty());
  EXPECT_EQ(rules(check_categorisation(parse_plain_tables(key_value("key-categorisationSchemata")), 5)),
            (std::vector<std::string>{"schema-count"}));
}

TEST(StateTables, TransitionTypes) {
  PlainTable tr{{"Actor", "Start State", "End State", "Type", "Detail"}, {{"V", "A", "B", "whim", "x"}}, {}};
  EXPECT_EQ(rules(check_state_tables(std::nullopt, tr)), (std::vector<std::string>{"transition-type"}));
  PlainTable vars{{"State Machine", "Variable"}, {{"V", "x"}}, {}};
  EXPECT_EQ(check_state_tables(vars, std::nullopt).size(), 2u);
}

// ---------------------------------------------------------------------------
// Word limits

TEST(WordLimits, Aim) {
  EXPECT_EQ(check_word_limit("key-aim", words(60)).size(), 1u);
  EXPECT_EQ(check_word_limit("key-aim", words(60))[0].severity, Severity::Warning);
  EXPECT_TRUE(check_word_limit("key-aim", words(48)).empty());
  EXPECT_EQ(check_word_limit("key-aim", words(49)).size(), 1u);
}

TEST(WordLimits, PublishedTitleAndLists) {
  EXPECT_TRUE(check_word_limit("key-title",
                               "Adaptive Architecture: Transforming Future Museums with Intelligent Environments")
                  .empty());
  EXPECT_EQ(list_item_count("a, b, c"), 3u);
  EXPECT_EQ(list_item_count("- a\n- b\n"), 2u);
  EXPECT_EQ(check_word_limit("key-keywords", "a, b, c, d, e, f, g").size(), 1u);
  EXPECT_TRUE(check_word_limit("key-keywords", "a, b, c, d, e, f").empty());
}

// ---------------------------------------------------------------------------
// Assembly

TEST(Assemble, MuseumReplayGivesEveryStep) {
  ASSERT_EQ(museum().status, session::Status::Complete);
  auto r = assemble_report(museum());
  ASSERT_EQ(r.sections.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(r.sections[i].step, kSteps[i]);
    EXPECT_FALSE(r.sections[i].empty()) << r.sections[i].step;
  }
  EXPECT_FALSE(text::trim(r.conclusion).empty());
  EXPECT_TRUE(r.findings(Criterion::Conformity).empty()) << to_json(r).dump(2);
  EXPECT_EQ(r.title, "Adaptive Architecture: Transforming Future Museums with Intelligent Environments");
  ASSERT_TRUE(r.item("ArtificialLab"));
  for (const auto& s : r.sections)
    for (const auto& i : s.items)
      for (const auto& d : i.diagrams) EXPECT_TRUE(d.valid) << i.key;
}

TEST(Assemble, StoppedAfterAnalysis) {
  auto entries = museum_fixture();
  entries.resize(24);
  auto s = replay(entries);
  ASSERT_NE(s.status, session::Status::Complete);
  EXPECT_EQ(code_of([&] { assemble_report(s); }), ErrorCode::MissingSection);
  auto r = assemble_report(s, {true});
  std::set<std::string> missing;
  for (const auto& f : r.findings(Criterion::Conformity))
    if (f.rule == "missing-step") missing.insert(f.subject);
  EXPECT_TRUE(missing.count("Artificial Lab"));
  EXPECT_TRUE(missing.count("Conclusion"));
  EXPECT_FALSE(missing.count("Problem Statement"));
}

TEST(Assemble, FailedDiagramFallsBackToRawText) {
  auto entries = museum_fixture();
  auto bad = config::read_file(eabss::testing::data_path("diagrams/bad_usecase.mmd"));
  for (auto& e : entries) {
    if (e.reply.find("graph LR") != std::string::npos) {
      e.reply = "```mermaid\n" + bad + "```";
      e.reply_hash = text::fnv1a_hex(e.reply);
    }
  }
  auto r = assemble_report(replay(entries));
  bool found = false;
  for (const auto& s : r.sections)
    for (const auto& i : s.items)
      for (const auto& d : i.diagrams)
        if (d.kind == DiagramKind::UseCase) {
          found = true;
          EXPECT_FALSE(d.valid);
          EXPECT_EQ(d.text, d.source);
        }
  EXPECT_TRUE(found);
  auto conformity = rules(r.findings(Criterion::Conformity));
  EXPECT_NE(std::find(conformity.begin(), conformity.end(), "diagram-errors"), conformity.end());
  auto md = to_markdown(r);
  EXPECT_NE(md.find("```text\n"), std::string::npos);
  EXPECT_NE(md.find("## Appendix: diagram diagnostics"), std::string::npos);
  EXPECT_NE(md.find("R1"), std::string::npos);
}

TEST(Assemble, ActorNamesFromList) {
  EXPECT_EQ(actor_names("1. **Visitor**: someone\n2. Educator - teaches\n- Technician (staff)\nprose"),
            (std::vector<std::string>{"Visitor", "Educator", "Technician"}));
  EXPECT_EQ(actor_names(key_value("key-umlActors")), kActors);
}

// ---------------------------------------------------------------------------
// Rubric and export

TEST(Rubric, ManualCriteriaTakeNoFindings) {
  RubricSheet r;
  EXPECT_EQ(r.entries.size(), 7u);
  EXPECT_EQ(code_of([&] { r.add({Criterion::Believability, "x", "y", Severity::Warning, {}}); }), ErrorCode::InvalidAction);
  EXPECT_EQ(code_of([&] { r.add({Criterion::Originality, "x", "y", Severity::Warning, {}}); }), ErrorCode::InvalidAction);
  r.rate(Criterion::Believability, 4, "plausible");
  EXPECT_EQ(r.at(Criterion::Believability).rating, 4);
  EXPECT_EQ(code_of([&] { r.rate(Criterion::Originality, 6); }), ErrorCode::InvalidParams);
  EXPECT_EQ(code_of([&] { r.rate(Criterion::Originality, 0); }), ErrorCode::InvalidParams);
}

TEST(Export, JsonRoundTripIsLossless) {
  auto r = assemble_report(museum());
  r.rubric.rate(Criterion::Originality, 3, "note | with pipe");
  eabss::testing::TempDir dir;
  export_report(r, "json", dir.file("r.json"));
  EXPECT_EQ(import_report(dir.file("r.json")), r);
}

TEST(Export, MarkdownEmbedsDiagramsAndTables) {
  auto md = render(assemble_report(museum()), Format::Markdown);
  EXPECT_NE(md.find("```mermaid\ngraph LR\n"), std::string::npos);
  EXPECT_NE(md.find("| Category | Sub-Category | Explanation | Justification |"), std::string::npos);
  EXPECT_NE(md.find("## 8. Artificial Lab"), std::string::npos);
  EXPECT_NE(md.find("## Evaluation rubric"), std::string::npos);
  EXPECT_EQ(md.find("## Appendix"), std::string::npos);
}

TEST(Export, Errors) {
  eabss::testing::TempDir dir;
  auto r = assemble_report(museum());
  EXPECT_EQ(code_of([&] { export_report(r, "pdf", dir.file("r.pdf")); }), ErrorCode::UnknownFormat);
  config::write_file(dir.file("bad.json"), "{not json");
  EXPECT_EQ(code_of([&] { import_report(dir.file("bad.json")); }), ErrorCode::IOFailure);
  config::write_file(dir.file("old.json"), R"({"schema_version": 99})");
  EXPECT_EQ(code_of([&] { import_report(dir.file("old.json")); }), ErrorCode::IOFailure);
  EXPECT_EQ(code_of([&] { import_report(dir.file("absent.json")); }), ErrorCode::IOFailure);
}
