"""murreid command line: synth, split, train, eval, predict and serve.

Exit codes: 0 success, 2 usage or input error, 1 internal error.
"""

from __future__ import annotations

import argparse
import base64
import binascii
import json
import logging
import os
import sys
from dataclasses import fields, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path


from . import corpus, models, nn, synth
from .dsp import AudioError, DspConfig, decode_wav, parse_wav
from .evaluation import confusion, metrics, render_report

log = logging.getLogger("murreid")

SEED_ENV = "MURREID_SEED"


class UsageError(Exception):
    pass


INPUT_ERRORS = (
    UsageError,
    corpus.CorpusError,
    AudioError,
    models.BundleError,
    models.AudioRequired,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    ValueError,
)


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def read_config_file(path: str | None) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys use underscores."""
    if not path:
        return {}
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (x.strip() for x in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _setting(args, conf: dict, key: str, default, cast=str):
    """CLI flag, then config file, then the built-in default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in conf:
        raw = conf[key]
        if cast is None or raw.lower() == "none":
            return None
        try:
            return cast(raw)
        except ValueError:
            raise UsageError(f"config value {key}={raw!r} is invalid") from None
    return default


def _opt_int(raw: str) -> int | None:
    return None if raw.lower() == "none" else int(raw)


def _ratios(raw: str) -> tuple[float, float, float]:
    parts = tuple(float(x) for x in raw.split(","))
    if len(parts) != 3:
        raise ValueError("ratios must be train,val,test")
    return parts  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# shared helpers


def _load_partition(manifest: str, split_path: str):
    utts = corpus.parse_manifest(manifest)
    sm = corpus.read_split(split_path)
    known = {u.id for u in utts}
    missing = [uid for uid in sm.assignment if uid not in known]
    if missing:
        raise UsageError(f"split references {len(missing)} id(s) not in the manifest, e.g. {missing[0]!r}")
    return utts, sm


def classification_payload(model, transcript: str, audio=None, top: int | None = None) -> dict:
    label, scores = models.predict(model, transcript, audio)
    payload = {
        "dialect": label.name,
        "code": label.code,
        "scores": {d.code: float(s) for d, s in zip(model.labels, scores)},
    }
    if top:
        order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))[:top]
        payload["top"] = [[model.labels.by_index(k).code, float(scores[k])] for k in order]
    return payload


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = synth.SynthConfig(
        n_classes=args.n_classes,
        per_class=args.per_class,
        placement=args.placement,
        p_text=args.p_text,
        seed=args.seed if args.seed is not None else default_seed(),
    )
    utts = synth.generate(cfg, args.out_dir)
    sep = synth.describe(cfg)
    print(json.dumps({
        "manifest": str(Path(args.out_dir) / "manifest.tsv"),
        "utterances": len(utts),
        "text_classes": list(sep.text_classes),
        "audio_classes": list(sep.audio_classes),
    }))
    return 0


def cmd_split(args) -> int:
    conf = read_config_file(args.config)
    seed = _setting(args, conf, "seed", None, int)
    seed = default_seed() if seed is None else seed
    ratios = _setting(args, conf, "ratios", corpus.DEFAULT_RATIOS, _ratios)
    mode = _setting(args, conf, "mode", "random-sentence")
    max_duration = _setting(args, conf, "max_duration", 10.0, float)
    utts = corpus.parse_manifest(args.manifest)
    kept = corpus.filter_by_duration(utts, max_duration)
    sm = corpus.split(kept, ratios, seed, mode)
    corpus.write_split(sm, args.out)
    counts = sm.counts()
    print(json.dumps({"excluded_by_duration": len(utts) - len(kept), **counts}))
    return 0


def _train_config(args, conf: dict) -> nn.TrainConfig:
    seed = _setting(args, conf, "seed", None, int)
    return nn.TrainConfig(
        learning_rate=_setting(args, conf, "lr", 1e-4, float),
        epochs=_setting(args, conf, "epochs", 3, int),
        batch_size=_setting(args, conf, "batch_size", 16, int),
        seed=default_seed() if seed is None else seed,
        optimizer=_setting(args, conf, "optimizer", "adam"),
        max_steps=_setting(args, conf, "max_steps", 100_000, _opt_int),
    )


def _model_config(args, conf: dict, kind: str) -> models.ModelConfig:
    base = models.TEXT_DEFAULTS if kind == "text" else models.FUSION_DEFAULTS
    overrides = {}
    for f in fields(models.ModelConfig):
        cast = {int: int, float: float, str: str}.get(type(getattr(base, f.name)), _opt_int)
        value = _setting(args, conf, f.name, None, cast)
        if value is not None:
            overrides[f.name] = value
    return replace(base, **overrides)


def cmd_train(args) -> int:
    conf = read_config_file(args.config)
    kind = _setting(args, conf, "model_kind", None)
    if kind not in ("text", "fusion"):
        raise UsageError("--model-kind must be 'text' or 'fusion'")
    utts, sm = _load_partition(args.manifest, args.split)
    train, val = sm.select(utts, "train"), sm.select(utts, "val")
    cfg = _train_config(args, conf)
    mcfg = _model_config(args, conf, kind)
    if kind == "text":
        model, report = models.train_text_only(train, val, cfg, mcfg)
    else:
        dsp = DspConfig(feature_kind=_setting(args, conf, "feature_kind", "log-mel"))
        model, report = models.train_fusion(
            train, val, cfg, mcfg, dsp, audio_root=Path(args.manifest).resolve().parent
        )
    models.save_bundle(model, args.out)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model = models.load_bundle(args.model)
    if args.model_kind and args.model_kind != model.kind:
        raise UsageError(f"expected a {args.model_kind} model but {args.model} holds a {model.kind} model")
    utts, sm = _load_partition(args.manifest, args.split)
    test = sm.select(utts, args.partition)
    if not test:
        raise UsageError(f"{args.partition} partition is empty")
    pred = models.predict_many(model, test, audio_root=Path(args.manifest).resolve().parent)
    truth = [u.dialect.index for u in test]
    report = metrics(confusion(truth, pred, model.n_classes))
    sys.stdout.write(render_report(report, args.style, model.labels, args.full_precision))
    return 0


def cmd_predict(args) -> int:
    model = models.load_bundle(args.model)
    audio = decode_wav(args.wav) if args.wav else None
    print(json.dumps(classification_payload(model, args.transcript, audio, top=5)))
    return 0


# ---------------------------------------------------------------------------
# HTTP


def make_handler(model):
    class Handler(BaseHTTPRequestHandler):
        server_version = "murreid"

        def log_message(self, fmt, *a):
            log.debug("%s - %s", self.address_string(), fmt % a)

        def _send(self, status: int, body, content_type: str = "application/json") -> None:
            data = body if isinstance(body, bytes) else json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/healthz":
                self._send(200, b"ok", "text/plain; charset=utf-8")
            else:
                self._send(404, {"error": "not found"})

        def do_POST(self):
            if self.path != "/classify":
                self._send(404, {"error": "not found"})
                return
            try:
                status, body = self._classify()
            except Exception:
                log.exception("classification failed")
                status, body = 500, {"error": "internal error"}
            self._send(status, body)

        def _classify(self):
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length)
            try:
                req = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                return 400, {"error": "malformed JSON"}
            if not isinstance(req, dict) or not isinstance(req.get("transcript"), str):
                return 400, {"error": "expected a JSON object with a string 'transcript'"}
            audio = None
            b64 = req.get("audio_wav_base64")
            if b64 is not None:
                if not isinstance(b64, str):
                    return 400, {"error": "audio_wav_base64 must be a string"}
                try:
                    audio = parse_wav(base64.b64decode(b64, validate=True), "audio_wav_base64")
                except (binascii.Error, AudioError) as exc:
                    return 400, {"error": f"bad audio: {exc}"}
            if isinstance(model, models.FusionModel) and audio is None:
                return 422, {"error": "audio required for a fusion model"}
            return 200, classification_payload(model, req["transcript"], audio)

    return Handler


def make_server(model, host: str = "127.0.0.1", port: int = 8000) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), make_handler(model))


def cmd_serve(args) -> int:
    model = models.load_bundle(args.model)
    server = make_server(model, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"serving {model.kind} model on http://{host}:{port}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="murreid", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--placement", choices=synth.PLACEMENTS, default="split")
    p.add_argument("--p-text", type=float, default=0.8)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a train/val/test split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", type=_ratios, help="train,val,test (default 0.7,0.15,0.15)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=corpus.SPLIT_MODES)
    p.add_argument("--max-duration", type=float, help="drop utterances at least this long (default 10 s)")
    p.add_argument("--config")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on the train partition")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--model-kind", choices=("text", "fusion"))
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=_opt_int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--text-layers", type=int)
    p.add_argument("--audio-layers", type=int)
    p.add_argument("--audio-proj", type=int)
    p.add_argument("--pool-rows", type=int)
    p.add_argument("--text-length", type=int)
    p.add_argument("--granularity", choices=("word", "char"))
    p.add_argument("--min-count", type=int)
    p.add_argument("--max-vocab", type=_opt_int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--feature-kind", choices=("log-mel", "mfcc"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on the test partition")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--model-kind", choices=("text", "fusion"), help="fail unless the bundle is of this kind")
    p.add_argument("--partition", choices=corpus.PARTITIONS, default="test")
    p.add_argument("--style", choices=("tsv", "table"), default="tsv")
    p.add_argument("--full-precision", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one transcript (and WAV)")
    p.add_argument("--model", required=True)
    p.add_argument("--transcript", required=True)
    p.add_argument("--wav")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("serve", help="HTTP inference endpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"murreid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"murreid {args.command}: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
