import pytest

from spice.data import speaker_split, synth_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """3 speakers/class x 4 utterances, split 70:15:15 stratified."""
    root = tmp_path_factory.mktemp("corpus")
    rows, manifest = synth_corpus(3, 4, seed=101, out_dir=root)
    rows = speaker_split(rows, seed=7, stratify=True)
    return {
        "rows": rows,
        "manifest": manifest,
        "train": [r for r in rows if r.split == "train"],
        "val": [r for r in rows if r.split == "val"],
        "test": [r for r in rows if r.split == "test"],
    }
