import numpy as np
import pytest

ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str = "") -> None:
    """Register one acceptance verdict; the summary hook prints them all."""
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


def central_diff(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f(x)
        flat[i] = old - step
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_manifest(seed: int):
    """A valid manifest with random ids, lengths, events, vocab and embeddings."""
    from wsdvc.io import DatasetManifest, GTEvent, VideoRecord

    r = np.random.default_rng(seed)
    vocab = ["<bos>", "<eos>"] + [f"w{i}_{r.integers(1000)}" for i in range(int(r.integers(1, 12)))]
    videos = []
    for k in range(int(r.integers(0, 6))):
        T = int(r.integers(1, 300))
        events = None
        if r.random() < 0.7:
            events = []
            for _ in range(int(r.integers(0, 4))):
                s = int(r.integers(0, T))
                e = int(r.integers(s + 1, T + 1))
                events.append(GTEvent(s, e, [int(t) for t in r.integers(0, len(vocab), int(r.integers(0, 6)))]))
        embs = None
        if events and r.random() < 0.5:
            embs = r.normal(size=(len(events), 3)).tolist()
        videos.append(VideoRecord(f"vid-{seed}-{k}", f"features/{k}.txt", T, events, embs))
    fd = float(r.choice([1.0, 0.5, float(r.uniform(0.01, 3.0))]))
    teachers = None if r.random() < 0.3 else "teachers.jsonl"
    return DatasetManifest(videos, vocab, fd, teachers).validate()
