import os
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from spoofattr import corpus
from spoofattr.corpus import (
    BONAFIDE_LABELS, AttributeLabelSet, CorpusError, CorpusManifest, LabelMap, Utterance,
)
from spoofattr.protocol import ProtocolSpec


def _spoof(uid, system="A07", labels=("text", "rnn_related", "neural_network"), voice=None):
    return Utterance(uid, f"{uid}.flac", "en", system, False, None, voice), AttributeLabelSet(*labels)


def _bona(uid, speaker="LA_0001"):
    return Utterance(uid, f"{uid}.flac", "en", "bonafide", True, speaker), BONAFIDE_LABELS


class TestLabels:
    def test_bonafide_must_be_all_or_nothing(self):
        with pytest.raises(CorpusError):
            AttributeLabelSet("bonafide", "vits", "vits")
        with pytest.raises(CorpusError):
            AttributeLabelSet("text", "bonafide", "hifi-gan")

    def test_unknown_input_type(self):
        with pytest.raises(CorpusError):
            AttributeLabelSet("music", "a", "b")

    def test_binary_view(self):
        assert BONAFIDE_LABELS.get("binary") == "bonafide"
        assert AttributeLabelSet("text", "a", "b").get("binary") == "spoof"

    def test_bonafide_utterance_needs_bonafide_system(self):
        with pytest.raises(CorpusError):
            Utterance("x", "x.wav", "en", "A01", True)

    def test_empty_audio_path(self):
        with pytest.raises(CorpusError):
            Utterance("x", "", "en", "A01", False)


class TestAsvspoof:
    def test_parses_and_labels(self, tmp_path):
        proto = tmp_path / "p.txt"
        proto.write_text("LA_0079 LA_T_1 - - bonafide\nLA_0079 LA_T_2 - A01 spoof\nLA_0080 LA_T_3 - A17 spoof\n")
        m = corpus.ingest_asvspoof(proto, corpus.load_label_map("asvspoof2019_la"), "train", "audio")
        idx = m.index()
        assert idx["LA_T_1"][1] == BONAFIDE_LABELS
        assert idx["LA_T_1"][0].native_speaker_id == "LA_0079"
        assert idx["LA_T_2"][1].input_type == "text"
        assert idx["LA_T_3"][1].input_type == "speech"
        assert idx["LA_T_2"][0].audio_path == str(Path("audio") / "LA_T_2.flac")
        assert m.created_from[0][0] == "p.txt"

    def test_unknown_attack_is_named(self, tmp_path):
        proto = tmp_path / "p.txt"
        proto.write_text("S LA_T_1 - A99 spoof\n")
        with pytest.raises(CorpusError, match="A99"):
            corpus.ingest_asvspoof(proto, corpus.load_label_map("asvspoof2019_la"))

    def test_duplicate_and_malformed(self, tmp_path):
        lm = corpus.load_label_map("asvspoof2019_la")
        (tmp_path / "d.txt").write_text("S u1 - - bonafide\nS u1 - - bonafide\n")
        with pytest.raises(CorpusError, match="duplicate"):
            corpus.ingest_asvspoof(tmp_path / "d.txt", lm)
        (tmp_path / "m.txt").write_text("S u1 - - bonafide\nS u2 A01 spoof\n")
        with pytest.raises(CorpusError, match=":2:"):
            corpus.ingest_asvspoof(tmp_path / "m.txt", lm)

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.txt").write_text("")
        m = corpus.ingest_asvspoof(tmp_path / "e.txt", corpus.load_label_map("asvspoof2019_la"))
        assert len(m) == 0
        assert sum(corpus.corpus_stats(m, "vocoder")["all"].values()) == 0

    def test_shipped_map_covers_all_attacks(self):
        lm = corpus.load_label_map("asvspoof2019_la")
        for k in range(1, 20):
            assert f"A{k:02d}" in lm
        assert "bonafide" not in lm.classes("vocoder")


class TestMlaad:
    def _tables(self, tmp_path, names, bona=(("b/0.wav", "spk0", "en"),)):
        meta = tmp_path / "meta.csv"
        meta.write_text("path|language|model_name\n" +
                        "".join(f"s/{i}.wav|de|{n}\n" for i, n in enumerate(names)))
        index = tmp_path / "bona.tsv"
        index.write_text("path\tspeaker\tlanguage\n" + "".join("\t".join(r) + "\n" for r in bona))
        return meta, index

    def test_vits_variants_collapse(self, tmp_path):
        meta, index = self._tables(tmp_path, ["Jenny", "VITS", "VITS-Neon", "VITS-MMS"])
        m = corpus.ingest_mlaad(meta, index, corpus.load_label_map("mlaad"))
        spoofs = [lab for u, lab in m if not u.is_bonafide]
        assert {(l.acoustic_model, l.vocoder) for l in spoofs} == {("vits", "vits")}

    def test_end_to_end_system_keeps_its_name(self, tmp_path):
        meta, index = self._tables(tmp_path, ["bark"])
        m = corpus.ingest_mlaad(meta, index, corpus.load_label_map("mlaad"))
        lab = m.index()["s/0.wav"][1]
        assert (lab.acoustic_model, lab.vocoder) == ("bark", "bark")

    def test_single_bonafide(self, tmp_path):
        meta, index = self._tables(tmp_path, [])
        m = corpus.ingest_mlaad(meta, index, corpus.load_label_map("mlaad"))
        assert len(m) == 1
        assert m.utterances[0][0].native_speaker_id == "spk0"

    def test_missing_names_listed(self, tmp_path):
        meta, index = self._tables(tmp_path, ["nope-1", "VITS", "nope-2"])
        with pytest.raises(CorpusError, match=r"nope-1.*nope-2"):
            corpus.ingest_mlaad(meta, index, corpus.load_label_map("mlaad"))

    def test_schema_error(self, tmp_path):
        (tmp_path / "meta.csv").write_text("path,lang,model\nx,en,VITS\n")
        (tmp_path / "b.tsv").write_text("path\tspeaker\tlanguage\n")
        with pytest.raises(CorpusError, match="missing column"):
            corpus.ingest_mlaad(tmp_path / "meta.csv", tmp_path / "b.tsv", corpus.load_label_map("mlaad"))

    def test_pattern_entries(self):
        lm = LabelMap({}, (("x-*", AttributeLabelSet("text", "a", "b")),))
        assert lm.lookup("x-1").acoustic_model == "a"
        assert "y" not in lm


class TestStats:
    def test_identity_counts(self):
        m = CorpusManifest((_spoof("a", labels=("text", "a", "v")), _spoof("b", labels=("text", "b", "v")),
                            _spoof("c", labels=("speech", "c", "v"))))
        assert dict(corpus.corpus_stats(m, "acoustic_model")["all"]) == {"a": 1, "b": 1, "c": 1}

    def test_per_partition_and_render(self):
        m = CorpusManifest((_bona("a"), _spoof("b"), _spoof("c")))
        proto = ProtocolSpec({"a": "train", "b": "train", "c": "eval"})
        table = corpus.corpus_stats(m, "vocoder", proto)
        assert table["train"] == {"bonafide": 1, "neural_network": 1}
        text = corpus.render_stats(table)
        assert text.splitlines()[0] == "partition\tbonafide\tneural_network"
        assert text.splitlines()[3] == "eval\t0\t1"

    def test_protocol_must_cover_manifest(self):
        m = CorpusManifest((_bona("a"), _spoof("b")))
        with pytest.raises(CorpusError):
            corpus.corpus_stats(m, "vocoder", ProtocolSpec({"a": "train"}))

    def test_unknown_task(self):
        with pytest.raises(CorpusError):
            corpus.corpus_stats(CorpusManifest(()), "speaker")


def test_duplicate_ids_rejected():
    with pytest.raises(CorpusError):
        CorpusManifest((_bona("a"), _spoof("a")))


_label = st.sampled_from([("text", "am1", "v1"), ("speech", "am2", "v2"), ("text", "am2", "v1"),
                          ("bonafide",) * 3])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(_label, st.sampled_from(["en", "de", "und"]), st.booleans()), max_size=30))
def test_manifest_round_trip_and_conservation(tmp_path_factory, rows):
    utts = []
    for i, (lab, lang, voiced) in enumerate(rows):
        bona = lab[0] == "bonafide"
        utts.append((Utterance(f"u{i}", f"a/u{i}.wav", lang, "bonafide" if bona else "sysX", bona,
                               "spk" if bona else None, f"voice:{i % 3}" if voiced else None),
                     AttributeLabelSet(*lab)))
    m = CorpusManifest(tuple(utts), "prop", (("src.txt", "0" * 64),))
    path = tmp_path_factory.mktemp("m") / "m.tsv"
    corpus.write_manifest(m, path)
    assert corpus.read_manifest(path) == m
    for task in corpus.ALL_TASKS:
        assert sum(corpus.corpus_stats(m, task)["all"].values()) == len(m)


# counts of the adapted source-tracing protocol; only checked when the files are available
ASV_PROTOCOLS = os.environ.get("SPOOFATTR_ASVSPOOF_PROTOCOLS")


@pytest.mark.skipif(not ASV_PROTOCOLS, reason="adapted ASVspoof 2019 LA protocol files not available")
@pytest.mark.parametrize("tag,bona,spoof", [("train", 7796, 71824), ("eval", 1638, 4194)])
def test_asvspoof_reference_counts(tag, bona, spoof):
    m = corpus.ingest_asvspoof(Path(ASV_PROTOCOLS) / f"{tag}.txt", corpus.load_label_map("asvspoof2019_la"), tag)
    counts = corpus.corpus_stats(m, "input_type")["all"]
    assert counts["bonafide"] == bona
    assert counts["text"] + counts["speech"] == spoof
