import numpy as np
import pytest
from hypothesis import given, strategies as st

from lllab.taskdata import (ANS_ID, EOS_ID, PAD_ID, Reject, TaskSpec, Vocabulary, VocabularyError,
                            build_vocabulary, decode_sample, dump_jsonl, encode_sample,
                            generate_task, load_jsonl, make_lm_prefix, parse_pseudo)


@pytest.fixture
def vocab():
    return Vocabulary(["t1", "t2"], ["w1", "w2", "w3", "q", "x"])


def test_special_ids_fixed(vocab):
    assert (vocab.id("<pad>"), vocab.id("<eos>"), vocab.id("<ans>")) == (PAD_ID, EOS_ID, ANS_ID)
    assert vocab.bos_ids == {"t1": 3, "t2": 4}
    assert vocab.special_ids == frozenset(range(5))


def test_encode_layout(vocab):
    s = encode_sample(vocab, "t1", "w1 w2", "q", "w3")
    b, w1, w2, q, w3 = (vocab.id(t) for t in ("<bos:t1>", "w1", "w2", "q", "w3"))
    assert s.encoded == (b, w1, w2, q, ANS_ID, w3, EOS_ID)
    assert s.a1 == 5 and s.T == 7
    assert s.prefix == (b, w1, w2, q, ANS_ID)


def test_decode_round_trip(vocab):
    s = encode_sample(vocab, "t2", "w1 x", "q", "w2 w1")
    assert decode_sample(vocab, s) == ("t2", "w1 x", "q", "w2 w1")


def test_unknown_token_and_task(vocab):
    with pytest.raises(VocabularyError):
        encode_sample(vocab, "t1", "zzz", "q", "w1")
    with pytest.raises(VocabularyError):
        encode_sample(vocab, "t9", "w1", "q", "w1")
    with pytest.raises(VocabularyError):
        make_lm_prefix(vocab, "t9")


def test_context_len_enforced(vocab):
    with pytest.raises(ValueError, match="context_len"):
        encode_sample(vocab, "t1", "w1 w2 w3", "q", "w1", context_len=6)


def test_content_collision_rejected():
    with pytest.raises(ValueError):
        Vocabulary(["t"], ["<eos>"])


def test_vocab_dict_round_trip(vocab):
    assert Vocabulary.from_dict(vocab.to_dict()) == vocab


@given(ctx=st.lists(st.sampled_from(["w1", "w2", "w3", "x"]), min_size=0, max_size=6),
       ans=st.lists(st.sampled_from(["w1", "w2", "w3", "x"]), min_size=1, max_size=6))
def test_encoding_invariants(ctx, ans):
    vocab = Vocabulary(["t1"], ["w1", "w2", "w3", "q", "x"])
    s = encode_sample(vocab, "t1", ctx, ["q"], ans)
    assert 0 < s.a1 < s.T
    assert s.encoded[s.a1 - 1] == ANS_ID and s.encoded[-1] == EOS_ID
    assert s.encoded[s.a1:-1] == s.answer
    # a well-formed generation parses back to the same sequence
    back = parse_pseudo(vocab, s.encoded)
    assert back.encoded == s.encoded and back.a1 == s.a1 and back.answer == s.answer


@pytest.mark.parametrize("seq,reason", [
    ([5, 6, ANS_ID, 7, EOS_ID], "no begin token"),
    ([3, 5, 6, 7, EOS_ID], "no answer separator"),
    ([3, 5, ANS_ID, 6, ANS_ID, 7, EOS_ID], "multiple answer separators"),
    ([3, 5, ANS_ID, 7], "not terminated by EOS"),
    ([3, 5, ANS_ID, 7, EOS_ID, 6, EOS_ID], "EOS before end"),
    ([3, 4, ANS_ID, 7, EOS_ID], "special token inside body"),
    ([3, 5, ANS_ID, EOS_ID], "empty answer"),
])
def test_parse_rejects(vocab, seq, reason):
    assert parse_pseudo(vocab, seq) == Reject(reason)


def test_parse_accepts_and_recovers_offset(vocab):
    s = parse_pseudo(vocab, [4, 5, 6, 8, ANS_ID, 7, EOS_ID])
    assert s.task_id == "t2" and s.a1 == 5 and s.answer == (7,)


# ------------------------------------------------------------- generators


def spec(kind, **kw):
    alpha = kw.pop("alphabet", tuple("abcdefgh"))
    return TaskSpec(kind, kind, alpha, **{"n_train": 30, "n_test": 10, **kw})


def words(vocab, ids):
    return [vocab.tokens[i] for i in ids]


@pytest.mark.parametrize("kind", ["copy", "reverse", "sort", "add_mod", "slot_fill", "classify"])
def test_generators_obey_their_rule(kind):
    sp = spec(kind)
    task = generate_task(sp)
    vocab = task.vocab
    for s in task.train + task.test:
        ctx, ans = words(vocab, s.context), words(vocab, s.answer)
        assert s.encoded[0] == vocab.bos_ids[kind]
        if kind == "copy":
            assert ans == ctx
        elif kind == "reverse":
            assert ans == ctx[::-1]
        elif kind == "sort":
            assert ans == sorted(ctx)
        elif kind == "add_mod":
            assert ans == [sp.alphabet[sum(sp.alphabet.index(c) for c in ctx) % 8]]
        elif kind == "slot_fill":
            key = words(vocab, s.question)[1]
            pos = ctx.index(key)
            assert ans == [ctx[(pos + 1) % len(ctx)]]
        else:
            low = sum(c in "abcd" for c in ctx)
            assert ans == ["lo" if 2 * low >= len(ctx) else "hi"]
        assert sp.min_len <= len(ctx) <= sp.max_len
        assert s.T <= sp.max_encoded_len()


def test_generation_is_pure_function_of_seed():
    a, b = generate_task(spec("reverse", seed=4)), generate_task(spec("reverse", seed=4))
    assert a.train == b.train and a.test == b.test
    c = generate_task(spec("reverse", seed=5))
    assert a.train != c.train


def test_larger_split_extends_smaller():
    small, big = generate_task(spec("sort", n_train=10)), generate_task(spec("sort", n_train=30))
    assert big.train[:10] == small.train


def test_slot_fill_defaults_to_f1_metric():
    assert spec("slot_fill").metric == "token_f1"
    assert spec("copy").metric == "exact_match"


def test_bad_specs():
    with pytest.raises(ValueError):
        spec("juggle")
    with pytest.raises(ValueError):
        spec("copy", n_train=0)
    with pytest.raises(ValueError):
        generate_task(spec("slot_fill", alphabet=("a", "b"), max_len=5))


def test_shared_vocabulary_across_tasks():
    specs = [spec("copy"), spec("sort", alphabet=tuple("0123"))]
    vocab = build_vocabulary(specs)
    tasks = [generate_task(s, vocab) for s in specs]
    assert tasks[0].vocab is tasks[1].vocab
    assert vocab.bos_ids == {"copy": 3, "sort": 4}


def test_jsonl_round_trip(tmp_path):
    task = generate_task(spec("reverse"))
    dump_jsonl(task.vocab, task.train, tmp_path / "d.jsonl")
    back = load_jsonl(task.vocab, tmp_path / "d.jsonl")
    assert tuple(back) == task.train


def test_train_and_test_use_distinct_streams():
    task = generate_task(spec("copy", n_train=50, n_test=50, min_len=5, max_len=5))
    # with 8^5 possible inputs, identical streams would make the splits equal
    assert [s.encoded for s in task.train[:50]] != [s.encoded for s in task.test]
    assert np.mean([s in set(task.train) for s in task.test]) < 0.1
