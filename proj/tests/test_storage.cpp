#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "isl/storage.hpp"

using namespace isl;

namespace {

StorageEngine::Options small_opts(Key lo, Key hi, bool locking = true) {
  StorageEngine::Options o;
  o.instance = 0;
  o.range = KeyRange{lo, hi};
  o.locking_enabled = locking;
  return o;
}

}  // namespace

TEST_CASE("populate loads deterministic images at version zero") {
  StorageEngine eng(small_opts(100, 200));
  Payload v;
  std::uint64_t ver = 7;
  REQUIRE(eng.peek(150, &v, &ver));
  CHECK(v == payload_for_key(150));
  CHECK(ver == 0);
  CHECK(eng.dump().size() == 100);
  CHECK_FALSE(eng.peek(99));
  CHECK_FALSE(eng.peek(200));
}

TEST_CASE("read and update inside one transaction") {
  StorageEngine eng(small_opts(0, 16));
  LocalTxn t;
  REQUIRE(eng.begin(t) == OpStatus::Ok);

  Payload got;
  REQUIRE(eng.read_row(t, 3, &got) == OpStatus::Ok);
  CHECK(got == payload_for_key(3));

  Payload next = payload_for_update(3, 42);
  REQUIRE(eng.update_row(t, 3, next) == OpStatus::Ok);
  REQUIRE(eng.read_row(t, 3, &got) == OpStatus::Ok);
  CHECK(got == next);  // reads own write

  eng.commit_local(t);
  Payload after;
  std::uint64_t ver = 0;
  REQUIRE(eng.peek(3, &after, &ver));
  CHECK(after == next);
  CHECK(ver == 1);
}

TEST_CASE("key routing statuses") {
  StorageEngine::Options o = small_opts(10, 20);
  o.populate = false;
  StorageEngine eng(o);
  eng.load_row(12, payload_for_key(12));

  LocalTxn t;
  REQUIRE(eng.begin(t) == OpStatus::Ok);
  Payload v;
  CHECK(eng.read_row(t, 5, &v) == OpStatus::WrongPartition);
  CHECK(eng.read_row(t, 15, &v) == OpStatus::NotFound);
  CHECK(eng.update_row(t, 25, v) == OpStatus::WrongPartition);
  CHECK(eng.read_row(t, 12, &v) == OpStatus::Ok);
  eng.abort_local(t);
}

TEST_CASE("no-wait conflicts abort immediately, shared readers coexist") {
  StorageEngine eng(small_opts(0, 8));
  LocalTxn a, b;
  REQUIRE(eng.begin(a) == OpStatus::Ok);
  REQUIRE(eng.begin(b) == OpStatus::Ok);

  Payload v;
  REQUIRE(eng.update_row(a, 1, payload_for_update(1, 1)) == OpStatus::Ok);
  CHECK(eng.read_row(b, 1, &v) == OpStatus::Conflict);
  CHECK(eng.update_row(b, 1, payload_for_update(1, 2)) == OpStatus::Conflict);

  // shared/shared is compatible
  REQUIRE(eng.read_row(a, 2, &v) == OpStatus::Ok);
  REQUIRE(eng.read_row(b, 2, &v) == OpStatus::Ok);
  // but an upgrade with another reader present is not
  CHECK(eng.update_row(a, 2, payload_for_update(2, 1)) == OpStatus::Conflict);

  eng.abort_local(b);
  // b released its share, a is now sole holder and may upgrade
  CHECK(eng.update_row(a, 2, payload_for_update(2, 1)) == OpStatus::Ok);
  eng.commit_local(a);
}

TEST_CASE("strict 2PL holds locks to commit, then frees them") {
  StorageEngine eng(small_opts(0, 8));
  LocalTxn t;
  REQUIRE(eng.begin(t) == OpStatus::Ok);
  REQUIRE(eng.update_row(t, 4, payload_for_update(4, 9)) == OpStatus::Ok);
  Payload v;
  REQUIRE(eng.read_row(t, 5, &v) == OpStatus::Ok);

  auto e4 = eng.lock_manager().peek(4);
  REQUIRE(e4.held);
  CHECK(e4.mode == LockMode::Exclusive);
  auto e5 = eng.lock_manager().peek(5);
  REQUIRE(e5.held);
  CHECK(e5.mode == LockMode::Shared);

  eng.commit_local(t);
  CHECK_FALSE(eng.lock_manager().peek(4).held);
  CHECK_FALSE(eng.lock_manager().peek(5).held);
}

TEST_CASE("abort restores pre-images and versions") {
  StorageEngine eng(small_opts(0, 8));
  LocalTxn t;
  REQUIRE(eng.begin(t) == OpStatus::Ok);
  REQUIRE(eng.update_row(t, 2, payload_for_update(2, 5)) == OpStatus::Ok);
  REQUIRE(eng.update_row(t, 3, payload_for_update(3, 5)) == OpStatus::Ok);
  REQUIRE(eng.update_row(t, 2, payload_for_update(2, 6)) == OpStatus::Ok);
  eng.abort_local(t);

  Payload v;
  std::uint64_t ver = 9;
  REQUIRE(eng.peek(2, &v, &ver));
  CHECK(v == payload_for_key(2));
  CHECK(ver == 0);
  REQUIRE(eng.peek(3, &v, &ver));
  CHECK(v == payload_for_key(3));
  CHECK(ver == 0);
  CHECK_FALSE(eng.lock_manager().peek(2).held);
}

TEST_CASE("double update of one key bumps its version once per commit") {
  StorageEngine eng(small_opts(0, 8));
  LocalTxn t;
  REQUIRE(eng.begin(t) == OpStatus::Ok);
  REQUIRE(eng.update_row(t, 6, payload_for_update(6, 1)) == OpStatus::Ok);
  REQUIRE(eng.update_row(t, 6, payload_for_update(6, 2)) == OpStatus::Ok);
  REQUIRE(t.write_set.size() == 1);
  CHECK(t.write_set[0].before == payload_for_key(6));
  eng.commit_local(t);
  std::uint64_t ver = 0;
  REQUIRE(eng.peek(6, nullptr, &ver));
  CHECK(ver == 1);
}

TEST_CASE("wal records update, commit and abort in order") {
  StorageEngine eng(small_opts(0, 8));
  LocalTxn t;
  REQUIRE(eng.begin(t) == OpStatus::Ok);
  REQUIRE(eng.update_row(t, 1, payload_for_update(1, 11)) == OpStatus::Ok);
  REQUIRE(eng.update_row(t, 2, payload_for_update(2, 11)) == OpStatus::Ok);
  eng.commit_local(t);

  LocalTxn u;
  REQUIRE(eng.begin(u) == OpStatus::Ok);
  REQUIRE(eng.update_row(u, 3, payload_for_update(3, 12)) == OpStatus::Ok);
  eng.abort_local(u);

  auto log = eng.wal().records();
  REQUIRE(log.size() == 5);
  CHECK(log[0].kind == LogKind::Update);
  CHECK(log[0].key == 1);
  CHECK(log[0].before == payload_for_key(1));
  CHECK(log[0].after == payload_for_update(1, 11));
  CHECK(log[1].kind == LogKind::Update);
  CHECK(log[2].kind == LogKind::Commit);
  CHECK(log[2].txn == t.id);
  CHECK(log[3].kind == LogKind::Update);
  CHECK(log[4].kind == LogKind::Abort);
  CHECK(log[4].txn == u.id);
  for (std::size_t i = 1; i < log.size(); ++i) CHECK(log[i].lsn > log[i - 1].lsn);
}

TEST_CASE("read-only prepare commits immediately with no log traffic") {
  StorageEngine eng(small_opts(0, 8));
  LocalTxn t;
  REQUIRE(eng.begin(t, 77) == OpStatus::Ok);
  Payload v;
  REQUIRE(eng.read_row(t, 1, &v) == OpStatus::Ok);

  auto before = eng.wal().records().size();
  CHECK(eng.prepare_local(t) == Vote::YesReadOnly);
  CHECK(t.state == TxnState::Committed);
  CHECK(eng.wal().records().size() == before);
  CHECK_FALSE(eng.lock_manager().peek(1).held);
}

TEST_CASE("update prepare logs before voting and keeps locks") {
  StorageEngine eng(small_opts(0, 8));
  LocalTxn t;
  REQUIRE(eng.begin(t, 78) == OpStatus::Ok);
  REQUIRE(eng.update_row(t, 1, payload_for_update(1, 7)) == OpStatus::Ok);

  CHECK(eng.prepare_local(t) == Vote::Yes);
  CHECK(t.state == TxnState::Prepared);
  auto log = eng.wal().records();
  REQUIRE(log.size() == 2);
  CHECK(log[1].kind == LogKind::Prepare);
  CHECK(log[1].gtid == 78);
  CHECK(eng.lock_manager().peek(1).held);

  eng.commit_local(t);
  CHECK(eng.wal().records().back().kind == LogKind::Commit);
  CHECK_FALSE(eng.lock_manager().peek(1).held);
  std::uint64_t ver;
  eng.peek(1, nullptr, &ver);
  CHECK(ver == 1);
}

TEST_CASE("flush failure during prepare forces a No vote and undo") {
  StorageEngine eng(small_opts(0, 8));
  LocalTxn t;
  REQUIRE(eng.begin(t, 79) == OpStatus::Ok);
  REQUIRE(eng.update_row(t, 1, payload_for_update(1, 8)) == OpStatus::Ok);

  eng.wal().arm_flush_failure();
  CHECK(eng.prepare_local(t) == Vote::No);
  CHECK(t.state == TxnState::Aborted);
  Payload v;
  REQUIRE(eng.peek(1, &v));
  CHECK(v == payload_for_key(1));
  CHECK_FALSE(eng.lock_manager().peek(1).held);
  CHECK(eng.wal().records().back().kind == LogKind::Abort);
}

TEST_CASE("shutdown refuses new transactions") {
  StorageEngine eng(small_opts(0, 8));
  eng.begin_shutdown();
  LocalTxn t;
  CHECK(eng.begin(t) == OpStatus::Refused);
}

TEST_CASE("locking defaults: off engines still lock branches and forced txns") {
  StorageEngine eng(small_opts(0, 8, /*locking=*/false));

  LocalTxn plain;
  REQUIRE(eng.begin(plain) == OpStatus::Ok);
  CHECK_FALSE(plain.use_locks);
  REQUIRE(eng.update_row(plain, 1, payload_for_update(1, 1)) == OpStatus::Ok);
  CHECK_FALSE(eng.lock_manager().peek(1).held);
  eng.commit_local(plain);

  LocalTxn branch;
  REQUIRE(eng.begin(branch, /*gtid=*/5) == OpStatus::Ok);
  CHECK(branch.use_locks);
  REQUIRE(eng.update_row(branch, 2, payload_for_update(2, 2)) == OpStatus::Ok);
  CHECK(eng.lock_manager().peek(2).held);
  eng.abort_local(branch);

  LocalTxn forced;
  REQUIRE(eng.begin(forced, 0, 0, /*force_locks=*/true) == OpStatus::Ok);
  CHECK(forced.use_locks);
  eng.abort_local(forced);
}

TEST_CASE("serial scripts produce identical state with locking on or off") {
  StorageEngine on(small_opts(0, 16, true));
  StorageEngine off(small_opts(0, 16, false));
  std::mt19937_64 rng(123);
  for (int i = 0; i < 50; ++i) {
    std::uint64_t tag = 1000 + i;
    bool commit = rng() & 1;
    for (StorageEngine* e : {&on, &off}) {
      LocalTxn t;
      std::mt19937_64 ops(i);  // same ops for both engines
      REQUIRE(e->begin(t, 0, tag) == OpStatus::Ok);
      for (int j = 0; j < 4; ++j) {
        Key k = bounded(ops(), 16);
        if (ops() & 1) {
          REQUIRE(e->update_row(t, k, payload_for_update(k, tag)) == OpStatus::Ok);
        } else {
          Payload v;
          REQUIRE(e->read_row(t, k, &v) == OpStatus::Ok);
        }
      }
      if (commit)
        e->commit_local(t);
      else
        e->abort_local(t);
    }
  }
  CHECK(on.state_fingerprint() == off.state_fingerprint());
}

TEST_CASE("replay of a committed-and-aborted mix reproduces row images") {
  StorageEngine eng(small_opts(0, 8));
  std::uint64_t tag = 1;
  for (int round = 0; round < 6; ++round) {
    LocalTxn t;
    REQUIRE(eng.begin(t, 0, tag) == OpStatus::Ok);
    REQUIRE(eng.update_row(t, bounded(splitmix64(round), 8),
                           payload_for_update(bounded(splitmix64(round), 8), tag)) ==
            OpStatus::Ok);
    REQUIRE(eng.update_row(t, round, payload_for_update(round, tag)) == OpStatus::Ok);
    if (round % 3 == 2)
      eng.abort_local(t);
    else
      eng.commit_local(t);
    ++tag;
  }

  auto rebuilt = StorageEngine::replay(eng.wal().records(), eng.range());
  auto live = eng.dump();
  REQUIRE(rebuilt.size() == live.size());
  for (std::size_t i = 0; i < live.size(); ++i) {
    CHECK(std::get<0>(rebuilt[i]) == std::get<0>(live[i]));
    CHECK(std::get<1>(rebuilt[i]) == std::get<2>(live[i]));
  }
}

// Two concurrent scripted transactions under NO_WAIT, every interleaving drawn
// from a seeded coin: the surviving transactions must be serializable in commit
// order, the WAL replay must match the live table, and each key's version must
// count its committed writers.
TEST_CASE("randomized two-transaction interleavings are serializable") {
  constexpr Key n_keys = 8;
  constexpr int n_seeds = 300;

  struct ScriptOp {
    bool update;
    Key key;
  };

  for (int seed = 0; seed < n_seeds; ++seed) {
    std::mt19937_64 rng(seed * 2654435761u + 17);

    std::array<std::vector<ScriptOp>, 2> script;
    for (auto& s : script)
      for (int j = 0; j < 3; ++j)
        s.push_back(ScriptOp{(rng() & 1) != 0, bounded(rng(), n_keys)});

    StorageEngine eng(small_opts(0, n_keys));
    std::array<LocalTxn, 2> txn;
    std::array<std::uint64_t, 2> tag = {100 + std::uint64_t(seed) * 2,
                                        101 + std::uint64_t(seed) * 2};
    std::array<std::size_t, 2> pc = {0, 0};
    std::array<bool, 2> dead = {false, false};
    std::array<bool, 2> committed = {false, false};
    std::vector<int> commit_order;

    for (int i = 0; i < 2; ++i)
      REQUIRE(eng.begin(txn[i], 0, tag[i]) == OpStatus::Ok);

    while (true) {
      bool progress = false;
      int first = static_cast<int>(rng() & 1);
      for (int attempt = 0; attempt < 2 && !progress; ++attempt) {
        int i = first ^ attempt;  // coin, then the other txn as fallback
        if (dead[i] || committed[i]) continue;
        progress = true;
        if (pc[i] == script[i].size()) {
          eng.commit_local(txn[i]);
          committed[i] = true;
          commit_order.push_back(i);
          continue;
        }
        const ScriptOp& op = script[i][pc[i]];
        OpStatus st;
        if (op.update) {
          st = eng.update_row(txn[i], op.key, payload_for_update(op.key, tag[i]));
        } else {
          Payload v;
          st = eng.read_row(txn[i], op.key, &v);
        }
        if (st == OpStatus::Conflict) {
          eng.abort_local(txn[i]);
          dead[i] = true;
        } else {
          REQUIRE(st == OpStatus::Ok);
          ++pc[i];
        }
      }
      if (!progress) break;
    }

    // serial oracle: apply committed scripts in commit order
    std::array<Payload, n_keys> img;
    std::array<std::uint64_t, n_keys> ver{};
    for (Key k = 0; k < n_keys; ++k) img[k] = payload_for_key(k);
    for (int i : commit_order) {
      std::array<bool, n_keys> wrote{};
      for (const ScriptOp& op : script[i]) {
        if (!op.update) continue;
        img[op.key] = payload_for_update(op.key, tag[i]);
        wrote[op.key] = true;
      }
      for (Key k = 0; k < n_keys; ++k)
        if (wrote[k]) ++ver[k];
    }

    for (Key k = 0; k < n_keys; ++k) {
      Payload v;
      std::uint64_t got_ver = 0;
      REQUIRE(eng.peek(k, &v, &got_ver));
      REQUIRE(v == img[k]);
      REQUIRE(got_ver == ver[k]);
    }

    // the log agrees with the live table
    auto rebuilt = StorageEngine::replay(eng.wal().records(), eng.range());
    for (Key k = 0; k < n_keys; ++k) REQUIRE(std::get<1>(rebuilt[k]) == img[k]);

    // every lock is gone
    for (Key k = 0; k < n_keys; ++k) REQUIRE_FALSE(eng.lock_manager().peek(k).held);
  }
}
