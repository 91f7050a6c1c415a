#include "mvp/annotation.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "mvp/annotation_http.hpp"

namespace mvp {
namespace {

std::vector<AssetList> lists(std::size_t n) {
  std::vector<AssetList> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = "L" + std::to_string(i);
    out.push_back({p, "p" + std::to_string(i), {p + "A", p + "B", p + "C", p + "D"}});
  }
  return out;
}

RankingRecord rec(const std::string& who, const std::string& list, RankGroups g) { return {who, list, std::move(g)}; }

RankGroups strict(const std::string& l, const std::string& order) {
  RankGroups g;
  for (char c : order) g.push_back({l + c});
  return g;
}

const std::vector<Annotator> kPeople{{"ann1", Role::annotator, 0},
                                     {"ann2", Role::annotator, 0},
                                     {"ann3", Role::annotator, 0},
                                     {"res", Role::researcher, 0}};

TEST(AnnotationStore, NextTaskAndPresentationOrder) {
  AnnotationStore s(lists(3), kPeople);
  const auto t = s.next_task("ann1");
  ASSERT_TRUE(t.has_value());
  EXPECT_EQ(t->asset_ids.size(), 4u);
  auto a = t->asset_ids, b = t->presentation_order;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
  EXPECT_EQ(s.next_task("ann1")->presentation_order, t->presentation_order);
  EXPECT_THROW(s.next_task("ghost"), AnnotationError);
  for (const auto& l : lists(3)) s.submit_ranking("ann1", rec("ann1", l.id, strict(l.id, "ABCD")));
  EXPECT_FALSE(s.next_task("ann1").has_value());
  EXPECT_EQ(s.idle_reason("ann1"), "exhausted");
}

TEST(AnnotationStore, CapBlocksFurtherTasks) {
  AnnotationStore s(lists(5), kPeople, {.cap = 2});
  for (int i = 0; i < 2; ++i) {
    const auto t = s.next_task("ann1");
    ASSERT_TRUE(t);
    s.submit_ranking("ann1", rec("ann1", t->asset_list_id, strict(t->asset_list_id, "ABCD")));
  }
  EXPECT_FALSE(s.next_task("ann1").has_value());
  EXPECT_EQ(s.idle_reason("ann1"), "cap_reached");
  try {
    s.submit_ranking("ann1", rec("ann1", "L4", strict("L4", "ABCD")));
    FAIL();
  } catch (const AnnotationError& e) {
    EXPECT_EQ(e.code(), "cap_exceeded");
  }
  // researchers are uncapped
  for (int i = 0; i < 3; ++i) {
    const auto t = s.next_task("res");
    ASSERT_TRUE(t);
    s.submit_ranking("res", rec("res", t->asset_list_id, strict(t->asset_list_id, "ABCD")));
  }
  EXPECT_EQ(s.annotator("res").completed_lists, 3u);
}

TEST(AnnotationStore, DefaultCapIs400) {
  AnnotationStore s(lists(1), kPeople);
  EXPECT_EQ(s.config().cap, 400u);
}

TEST(AnnotationStore, SubmissionValidation) {
  AnnotationStore s(lists(2), kPeople);
  const auto ack = s.submit_ranking("ann1", rec("ann1", "L0", {{"L0A"}, {"L0B", "L0C"}, {"L0D"}}));
  EXPECT_EQ(ack.completed_lists, 1u);
  try {
    s.submit_ranking("ann2", rec("ann2", "L0", strict("L0", "ABC")));
    FAIL();
  } catch (const AnnotationError& e) {
    EXPECT_EQ(e.code(), "validation_error");
    EXPECT_NE(std::string(e.what()).find("L0D"), std::string::npos);
  }
  try {
    s.submit_ranking("ann1", rec("ann1", "L0", strict("L0", "DCBA")));
    FAIL();
  } catch (const AnnotationError& e) {
    EXPECT_EQ(e.code(), "duplicate_submission");
  }
  EXPECT_THROW(s.submit_ranking("ann1", rec("ann2", "L1", strict("L1", "ABCD"))), AnnotationError);
  EXPECT_THROW(s.submit_ranking("ann1", rec("ann1", "L9", strict("L9", "ABCD"))), AnnotationError);
  EXPECT_EQ(s.annotator("ann1").completed_lists, 1u);
  EXPECT_EQ(s.annotator("ann2").completed_lists, 0u);
}

TEST(AnnotationStore, ExportOrderAndRoleFilter) {
  AnnotationStore s(lists(2), kPeople);
  EXPECT_TRUE(s.export_rankings().empty());
  s.submit_ranking("ann2", rec("ann2", "L1", strict("L1", "ABCD")));
  s.submit_ranking("ann1", rec("ann1", "L1", strict("L1", "ABCD")));
  s.submit_ranking("ann3", rec("ann3", "L0", strict("L0", "ABCD")));
  s.submit_ranking("res", rec("res", "L0", strict("L0", "ABCD")));
  const auto ex = s.export_rankings();
  ASSERT_EQ(ex.size(), 3u);
  EXPECT_EQ(ex[0].asset_list_id, "L0");
  EXPECT_EQ(ex[1].annotator_id, "ann1");
  EXPECT_EQ(ex[2].annotator_id, "ann2");
  EXPECT_EQ(s.export_rankings(Role::researcher).size(), 1u);
  EXPECT_EQ(s.export_rankings(std::nullopt).size(), 4u);
  EXPECT_EQ(s.export_rankings(), ex);
}

TEST(AnnotationStore, Conflicts) {
  AnnotationStore s(lists(3), kPeople);
  // L0: agreement; L1: strict inversion of (A,B); L2: crowd ties A,B
  s.submit_ranking("ann1", rec("ann1", "L0", strict("L0", "ABCD")));
  s.submit_ranking("res", rec("res", "L0", strict("L0", "ABCD")));
  EXPECT_TRUE(s.flag_conflicts("L0").conflicts.empty());

  s.submit_ranking("ann1", rec("ann1", "L1", strict("L1", "ABCD")));
  s.submit_ranking("res", rec("res", "L1", strict("L1", "BACD")));
  const auto r = s.flag_conflicts("L1");
  ASSERT_EQ(r.conflicts.size(), 1u);
  EXPECT_EQ(r.conflicts[0].consensus_winner, "L1A");
  EXPECT_EQ(r.conflicts[0].consensus_loser, "L1B");

  s.submit_ranking("ann1", rec("ann1", "L2", {{"L2A", "L2B"}, {"L2C"}, {"L2D"}}));
  s.submit_ranking("res", rec("res", "L2", strict("L2", "ABCD")));
  EXPECT_TRUE(s.flag_conflicts("L2").conflicts.empty());

  AnnotationStore t(lists(1), kPeople);
  t.submit_ranking("ann1", rec("ann1", "L0", strict("L0", "ABCD")));
  try {
    (void)t.flag_conflicts("L0");
    FAIL();
  } catch (const AnnotationError& e) {
    EXPECT_EQ(e.code(), "no_researcher_record");
  }
}

TEST(AnnotationStore, JournalReplayRebuildsState) {
  const auto path = std::filesystem::temp_directory_path() / "mvp_annotation_journal.ndjson";
  std::filesystem::remove(path);
  {
    AnnotationStore s(lists(3), kPeople, {.cap = 400, .seed = 0, .journal = path});
    s.register_annotator("late", Role::annotator);
    s.submit_ranking("ann1", rec("ann1", "L0", strict("L0", "ABCD")));
    s.submit_ranking("late", rec("late", "L2", strict("L2", "DCBA")));
  }
  AnnotationStore back(lists(3), kPeople, {.cap = 400, .seed = 0, .journal = path});
  EXPECT_EQ(back.annotator("late").completed_lists, 1u);
  EXPECT_EQ(back.annotator("ann1").completed_lists, 1u);
  EXPECT_EQ(back.export_rankings().size(), 2u);
  EXPECT_THROW(back.submit_ranking("ann1", rec("ann1", "L0", strict("L0", "ABCD"))), AnnotationError);
  std::filesystem::remove(path);
}

TEST(AnnotationStore, ConcurrentDuplicatesPersistOnce) {
  AnnotationStore s(lists(4), kPeople);
  std::atomic<int> accepted{0}, refused{0};
  std::vector<std::thread> threads;
  for (int i = 0; i < 16; ++i)
    threads.emplace_back([&, i] {
      const std::string who = i % 2 ? "ann1" : "ann2";
      try {
        s.submit_ranking(who, rec(who, "L0", strict("L0", "ABCD")));
        ++accepted;
      } catch (const AnnotationError& e) {
        if (e.code() == "duplicate_submission") ++refused;
      }
    });
  for (auto& t : threads) t.join();
  EXPECT_EQ(accepted, 2);
  EXPECT_EQ(refused, 14);
  EXPECT_EQ(s.export_rankings().size(), 2u);
  EXPECT_EQ(s.annotator("ann1").completed_lists, 1u);
}

class AnnotationHttp : public ::testing::Test {
 protected:
  void SetUp() override {
    store_ = std::make_unique<AnnotationStore>(lists(3), kPeople, AnnotationConfig{.cap = 2});
    ImagePrompt p{"p0", PromptSource::generated, "", {}, synth_prompt_image(8, 8, 1)};
    SynthConfig sc;
    sc.n_views = 2;
    auto a = synth_asset_generator(p, 0.5, 1, sc);
    a.id = "L0A";
    assets_.emplace(a.id, a);
    server_ = std::make_unique<AnnotationServer>(*store_, &assets_);
    port_ = server_->bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }
  void TearDown() override {
    server_->stop();
    thread_.join();
  }

  httplib::Result post(const RankingRecord& r) {
    return client_->Post("/rankings", nlohmann::json(r).dump(), "application/json");
  }

  std::unique_ptr<AnnotationStore> store_;
  std::map<std::string, MultiViewAsset> assets_;
  std::unique_ptr<AnnotationServer> server_;
  std::unique_ptr<httplib::Client> client_;
  std::thread thread_;
  int port_ = 0;
};

TEST_F(AnnotationHttp, RoundTrip) {
  auto res = client_->Get("/tasks/next?annotator=ann1");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const auto task = nlohmann::json::parse(res->body)["task"];
  const std::string list = task["asset_list_id"];
  EXPECT_EQ(task["presentation_order"].size(), 4u);

  const RankingRecord r = rec("ann1", list, {{list + "A"}, {list + "B", list + "C"}, {list + "D"}});
  res = post(r);
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 201);
  EXPECT_EQ(nlohmann::json::parse(res->body)["completed_lists"], 1);

  res = post(r);
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(nlohmann::json::parse(res->body)["code"], "duplicate_submission");

  res = client_->Get("/rankings/export");
  ASSERT_EQ(res->status, 200);
  EXPECT_EQ(nlohmann::json::parse(res->body).get<RankingRecord>(), r);

  // second list hits the cap of 2; a third task is withheld
  const auto t2 = nlohmann::json::parse(client_->Get("/tasks/next?annotator=ann1")->body)["task"];
  const std::string l2 = t2["asset_list_id"];
  EXPECT_EQ(post(rec("ann1", l2, strict(l2, "ABCD")))->status, 201);
  const auto none = nlohmann::json::parse(client_->Get("/tasks/next?annotator=ann1")->body);
  EXPECT_TRUE(none["task"].is_null());
  EXPECT_EQ(none["reason"], "cap_reached");
}

TEST_F(AnnotationHttp, StructuredErrors) {
  auto res = client_->Get("/tasks/next?annotator=ghost");
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(nlohmann::json::parse(res->body)["code"], "unknown_annotator");
  res = client_->Get("/tasks/next");
  EXPECT_EQ(res->status, 400);
  res = post(rec("ann1", "L0", strict("L0", "ABC")));
  EXPECT_EQ(res->status, 422);
  const auto err = nlohmann::json::parse(res->body);
  EXPECT_EQ(err["code"], "validation_error");
  EXPECT_NE(err["message"].get<std::string>().find("L0D"), std::string::npos);
  res = client_->Post("/rankings", "{not json", "application/json");
  EXPECT_EQ(res->status, 400);
  res = client_->Get("/conflicts/L0");
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(nlohmann::json::parse(res->body)["code"], "no_researcher_record");
  res = client_->Get("/nowhere");
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(nlohmann::json::parse(res->body)["code"], "not_found");
}

TEST_F(AnnotationHttp, ConflictsExportFilterAndViews) {
  post(rec("ann1", "L1", strict("L1", "ABCD")));
  post(rec("res", "L1", strict("L1", "BACD")));
  auto res = client_->Get("/conflicts/L1");
  ASSERT_EQ(res->status, 200);
  const auto rep = nlohmann::json::parse(res->body);
  ASSERT_EQ(rep["conflicts"].size(), 1u);
  EXPECT_EQ(rep["conflicts"][0]["consensus_winner"], "L1A");

  res = client_->Get("/rankings/export?role=researcher");
  EXPECT_EQ(std::count(res->body.begin(), res->body.end(), '\n'), 1);
  res = client_->Get("/rankings/export?role=all");
  EXPECT_EQ(std::count(res->body.begin(), res->body.end(), '\n'), 2);

  res = client_->Get("/assets/L0A/views/3");
  ASSERT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
  const Image img = decode_png(reinterpret_cast<const std::uint8_t*>(res->body.data()), res->body.size());
  EXPECT_EQ(img.width, 8u);
  EXPECT_EQ(client_->Get("/assets/L0A/views/4")->status, 404);
  EXPECT_EQ(client_->Get("/assets/nope/views/0")->status, 404);
}

TEST_F(AnnotationHttp, RegisterAnnotator) {
  auto res = client_->Post("/annotators", R"({"annotator_id": "newbie"})", "application/json");
  ASSERT_EQ(res->status, 201);
  EXPECT_EQ(nlohmann::json::parse(res->body)["role"], "annotator");
  EXPECT_EQ(client_->Get("/tasks/next?annotator=newbie")->status, 200);
  // same id again with the same role is a no-op; with another role it conflicts
  EXPECT_EQ(client_->Post("/annotators", R"({"annotator_id": "newbie"})", "application/json")->status, 201);
  res = client_->Post("/annotators", R"({"annotator_id": "newbie", "role": "researcher"})", "application/json");
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(client_->Post("/annotators", R"({"annotator_id": "x", "role": "boss"})", "application/json")->status, 422);
}

}  // namespace
}  // namespace mvp
