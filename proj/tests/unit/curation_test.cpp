#include <topicguard/curation.hpp>

#include <random>

#include <gtest/gtest.h>

#include <topicguard/errors.hpp>
#include <topicguard/mock_backend.hpp>

#include "random_data.hpp"

namespace topicguard {
namespace {

// Independent check of the curated layout: walk the original turns and,
// after each anchored bot turn, expect the selected distractors in order.
void expect_layout(const Conversation& conv, const AlignmentSample& s, const std::vector<std::size_t>& selected,
                   std::string_view refusal) {
  std::size_t pos = 0;
  for (std::size_t i = 0; i < conv.turns.size(); ++i) {
    ASSERT_LT(pos, s.turns.size());
    EXPECT_EQ(s.turns[pos].text, conv.turns[i].text);
    EXPECT_EQ(s.turns[pos].origin, Origin::on_topic);
    ++pos;
    for (std::size_t k : selected) {
      if (conv.distractors[k].anchor_index != i) continue;
      ASSERT_LT(pos + 1, s.turns.size());
      EXPECT_EQ(s.turns[pos].role, Role::user);
      EXPECT_EQ(s.turns[pos].text, conv.distractors[k].text);
      EXPECT_EQ(s.turns[pos].origin, Origin::distractor);
      EXPECT_EQ(s.turns[pos + 1].role, Role::bot);
      EXPECT_EQ(s.turns[pos + 1].text, refusal);
      EXPECT_EQ(s.turns[pos + 1].origin, Origin::refusal);
      pos += 2;
    }
  }
  EXPECT_EQ(pos, s.turns.size());
}

TEST(CurateRefusals, TemplateIsByteExact) {
  EXPECT_EQ(kRefusalTemplate, "I am sorry! I can only answer questions related to the scenario.");
}

TEST(CurateRefusals, RandomizedStructureHolds) {
  std::mt19937 rng(2024);
  for (std::size_t n = 0; n < 500; ++n) {
    const auto conv = testing::random_conversation(rng, n);
    const auto per = curate_refusals(conv);
    ASSERT_EQ(per.size(), conv.distractors.size());
    for (std::size_t k = 0; k < per.size(); ++k) {
      EXPECT_EQ(per[k].id, conv.id + "#d" + std::to_string(k));
      expect_layout(conv, per[k], {k}, kRefusalTemplate);
    }
    const auto combined = curate_refusals(conv, kRefusalTemplate, CurationMode::combined);
    if (conv.distractors.empty()) {
      EXPECT_TRUE(combined.empty());
      continue;
    }
    ASSERT_EQ(combined.size(), 1u);
    std::vector<std::size_t> all(conv.distractors.size());
    for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
    expect_layout(conv, combined[0], all, kRefusalTemplate);
    EXPECT_EQ(combined[0].turns.size(), conv.turns.size() + 2 * conv.distractors.size());
  }
}

TEST(CurateRefusals, RejectsBlankTemplate) {
  std::mt19937 rng(1);
  EXPECT_THROW(curate_refusals(testing::random_conversation(rng, 0), "  "), PreconditionError);
}

TEST(ValidateSample, DistractorNeedsAResponse) {
  AlignmentSample s;
  s.turns = {{Role::user, "q", Origin::on_topic},
             {Role::bot, "a", Origin::on_topic},
             {Role::user, "off topic?", Origin::distractor},
             {Role::bot, "sure, here is the answer", Origin::on_topic}};
  EXPECT_THROW(validate(s), InvariantError);
  s.turns.back().origin = Origin::mitigation;
  EXPECT_NO_THROW(validate(s));
}

TEST(CurateMitigations, UsesReplyAndPrefixOnly) {
  std::mt19937 rng(9);
  Conversation conv;
  do conv = testing::random_conversation(rng, 1, 3);
  while (conv.distractors.empty());
  MockBackend b;
  std::vector<std::string> prompts;
  b.set_responder([&](const ChatRequest& r) {
    prompts.push_back(r.messages.back().content);
    return std::string("Let's get back to your request.");
  });
  const auto out = curate_mitigations(conv, b, default_templates());
  ASSERT_EQ(out.size(), conv.distractors.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const auto& d = conv.distractors[k];
    EXPECT_NE(prompts[k].find(d.text), std::string::npos);
    // Turns after the anchor are not shown to the model.
    if (d.anchor_index + 1 < conv.turns.size()) {
      EXPECT_EQ(prompts[k].find(conv.turns[d.anchor_index + 1].text + "\n"), std::string::npos);
    }
    bool seen = false;
    for (const auto& t : out[k].turns) seen |= t.origin == Origin::mitigation;
    EXPECT_TRUE(seen);
  }
}

TEST(SampleConversion, RoundTripsThroughCoreSchema) {
  std::mt19937 rng(3);
  Conversation conv;
  do conv = testing::random_conversation(rng, 2);
  while (conv.distractors.empty());
  const auto sample = curate_refusals(conv).front();
  const auto core = to_conversation(sample);
  EXPECT_TRUE(core.distractors.empty());
  EXPECT_NO_THROW(validate(core));
  const auto back = sample_from_conversation(core);
  EXPECT_EQ(back, sample);
  EXPECT_EQ(back.conversation_id, conv.id);
}

TEST(ChatMessages, SystemThenAlternatingRoles) {
  std::mt19937 rng(4);
  Conversation conv;
  do conv = testing::random_conversation(rng, 3);
  while (conv.distractors.empty());
  const auto j = to_chat_messages(curate_refusals(conv).front());
  ASSERT_GE(j["messages"].size(), 3u);
  EXPECT_EQ(j["messages"][0]["role"], "system");
  EXPECT_EQ(j["messages"][0]["content"], conv.instruction.text);
  EXPECT_EQ(j["messages"][1]["role"], "user");
  EXPECT_EQ(j["messages"][2]["role"], "assistant");
}

TEST(DatasetStats, CountsTurnsAndFraction) {
  std::mt19937 rng(5);
  std::vector<AlignmentSample> all;
  std::size_t turns = 0, distractors = 0;
  for (std::size_t n = 0; n < 40; ++n) {
    for (auto& s : curate_refusals(testing::random_conversation(rng, n), kRefusalTemplate, CurationMode::combined)) {
      turns += s.turns.size();
      for (const auto& t : s.turns) distractors += t.origin == Origin::distractor;
      all.push_back(std::move(s));
    }
  }
  const auto st = dataset_stats(all);
  EXPECT_EQ(st.samples, all.size());
  EXPECT_EQ(st.turns, turns);
  EXPECT_EQ(st.user_turns, st.bot_turns);
  EXPECT_EQ(st.distractor_turns, distractors);
  EXPECT_DOUBLE_EQ(st.distractor_fraction, double(distractors) / double(turns));
  EXPECT_EQ(dataset_stats({}).distractor_fraction, 0.0);
}

}  // namespace
}  // namespace topicguard
