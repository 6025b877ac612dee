#include <string>

#include "cascn/config.hpp"
#include "doctest.h"

using namespace cascn;

namespace {
std::string message_of(const std::string& text) {
  try {
    RunConfig::parse(text, RunConfig::defaults(Scale::Desk));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}
}  // namespace

TEST_CASE("serialize then parse is a fixed point") {
  for (Scale s : {Scale::Paper, Scale::Desk}) {
    const RunConfig c = RunConfig::defaults(s);
    const std::string text = c.serialize();
    const RunConfig back = RunConfig::parse(text, RunConfig::defaults(Scale::Paper));
    CHECK(back.serialize() == text);
  }
  RunConfig c = RunConfig::defaults(Scale::Desk);
  c.set("lr", "0.0123456789");
  c.set("augment", "hflip,dflip");
  c.set("split", "0.6,0.2,0.2");
  c.set("optimizer", "sgd_nesterov");
  const RunConfig back = RunConfig::parse(c.serialize(), RunConfig::defaults(Scale::Paper));
  CHECK(back.optimizer.lr == c.optimizer.lr);
  CHECK(back.optimizer.kind == OptimizerKind::SgdNesterov);
  CHECK(back.augment.ops_string() == "hflip,dflip");
  CHECK(back.serialize() == c.serialize());
}

TEST_CASE("scale resets to that scale's defaults") {
  const RunConfig c = RunConfig::parse("scale=desk\nlr=0.01\n", RunConfig::defaults(Scale::Paper));
  CHECK(c.model.encoder.growth == ModelConfig::desk().encoder.growth);
  CHECK(c.batch_size == 2);
  CHECK(c.optimizer.lr == 0.01);
  CHECK(message_of("lr=0.01\nscale=desk\n").find("scale") != std::string::npos);
}

TEST_CASE("comments and blank lines are ignored") {
  const RunConfig c = RunConfig::parse("# a comment\n\nepochs=7\n", RunConfig::defaults(Scale::Desk));
  CHECK(c.epochs == 7);
}

TEST_CASE("errors name the offending key") {
  CHECK(message_of("no_such_key=1\n").find("no_such_key") != std::string::npos);
  CHECK(message_of("lr=fast\n").find("lr") != std::string::npos);
  CHECK(message_of("input_size=100x100\n").find("input_size") != std::string::npos);
  CHECK(message_of("batch_size=0\n").find("batch_size") != std::string::npos);
  CHECK(message_of("split=0.5,0.5,0.5\n").find("split") != std::string::npos);
  CHECK(message_of("augment=spin\n").find("augment") != std::string::npos);
  CHECK(message_of("optimizer=rmsprop\n").find("optimizer") != std::string::npos);
  CHECK(message_of("scale=huge\n").find("scale") != std::string::npos);
}

TEST_CASE("train options follow the config") {
  RunConfig c = RunConfig::defaults(Scale::Desk);
  c.set("seed", "42");
  c.set("epochs", "3");
  c.set("max_steps", "9");
  const TrainOptions t = c.train_options("out");
  CHECK(t.seed == 42);
  CHECK(c.split.seed == 42);
  CHECK(t.epochs == 3);
  CHECK(t.max_steps == 9);
  CHECK(t.out_dir == "out");
}
