"""Calibration driver for the synthetic transfer experiment (not shipped)."""
import sys, time, shutil
from pathlib import Path
import numpy as np

from uniphone import synth, transfer, evaluate as E
from uniphone.bpe import train_bpe
from uniphone.frontend import load_manifest, read_feat
from uniphone.training import TrainConfig
from uniphone.checkpoint import Checkpoint

ROOT = Path("/tmp/calib")

def load_split(root, lang, split):
    utts = load_manifest(root / lang / f"{split}.jsonl")
    feats = {u.id: read_feat(u.feats) for u in utts}
    return utts, feats

def attach_ipa(utts, lex):
    out = []
    for u in utts:
        u.ipa = " ".join(lex[w] for w in u.text.split())
        out.append(u)
    return out

def stage_data(root, lang, lex):
    tr_u, tr_f = load_split(root, lang, "train")
    dv_u, dv_f = load_split(root, lang, "dev")
    tr_u, dv_u = attach_ipa(tr_u, lex), attach_ipa(dv_u, lex)
    return transfer.StageData(lang, tr_u, dv_u, {**tr_f, **dv_f})

def read_lex(path):
    lex = {}
    for line in open(path, encoding="utf-8"):
        w, p = line.rstrip("\n").split("\t")
        lex[w] = p
    return lex

def wer_of(ckpt, utts, feats, beam=4):
    hyps = [(u.id, E.decode_utterance(ckpt, feats[u.id], beam_size=beam).text) for u in utts]
    refs = [(u.id, u.text) for u in utts]
    return E.score_corpus(refs, hyps, "word").wer

def main(hi=600, lo=100, pre_epochs=6, ft_epochs=12, seeds=(1, 2, 3), bf=2000, pre_warm=150, ft_warm=60, beam=4):
    t0 = time.time()
    if ROOT.exists(): shutil.rmtree(ROOT)
    cfg = synth.SynthConfig(seed=11)
    counts = {"alpha": (hi, 20, 10), "beta": (hi, 20, 10), "gamma": (lo, 15, 60)}
    synth.build_corpus(ROOT, counts=counts, cfg=cfg)
    print(f"corpus built {time.time()-t0:.0f}s")

    lex = {l: read_lex(ROOT / l / "lexicon.tsv") for l in ("alpha", "beta", "gamma")}
    data = {l: stage_data(ROOT, l, lex[l]) for l in ("alpha", "beta", "gamma")}
    te_u, te_f = load_split(ROOT, "gamma", "test")

    profile = dict(enc_layers=2, dec_layers=2, heads=2, d_model=64, d_ff=128,
                   conv_kernel=7, dropout_p=0.0, rel_pos_max=32, max_decode_len=128)
    pre_cfg = TrainConfig(epochs=pre_epochs, average_last=min(3, pre_epochs),
                          batch_frames=bf, warmup_steps=pre_warm, seed=7)
    parent, res = transfer.pretrain_ipa([data["alpha"], data["beta"]], profile, pre_cfg,
                                        seed=7, frontend_hash=cfg.frontend_hash())
    print(f"pretrain done {time.time()-t0:.0f}s; dev losses:",
          [round(m["dev_loss"],3) for m in res.metrics if "dev_loss" in m])

    bpe_model = train_bpe([u.text for u in data["gamma"].train], target_size=120)
    print("bpe vocab", len(bpe_model.vocab))

    ft_cfg = TrainConfig(epochs=ft_epochs, average_last=min(4, ft_epochs),
                         batch_frames=bf, warmup_steps=ft_warm, seed=0)
    adapted, _ = transfer.adapt_ipa_model(parent, data["gamma"])
    print(f"adapt done {time.time()-t0:.0f}s")

    rows = []
    for s in seeds:
        ft, _ = transfer.finetune_target(parent, data["gamma"], bpe_model, ft_cfg, seed=s)
        fta, _ = transfer.finetune_target(adapted, data["gamma"], bpe_model, ft_cfg, seed=s)
        bl, _ = transfer.train_monolingual_baseline(data["gamma"], bpe_model, profile, ft_cfg,
                                                    seed=s, frontend_hash=cfg.frontend_hash())
        w_ft, w_fta, w_bl = (wer_of(c, te_u, te_f) for c in (ft, fta, bl))
        rows.append((s, w_ft, w_fta, w_bl))
        print(f"seed {s}: finetuned {w_ft:.3f}  adapted+ft {w_fta:.3f}  baseline {w_bl:.3f}"
              f"   [{time.time()-t0:.0f}s]")
    wins = sum(1 for _, f, a, b in rows if f <= b)
    awins = sum(1 for _, f, a, b in rows if a <= f)
    print(f"finetuned<=baseline: {wins}/{len(rows)}; adapted<=plain: {awins}/{len(rows)}")
    print(f"total {time.time()-t0:.0f}s")

if __name__ == "__main__":
    kw = {}
    for a in sys.argv[1:]:
        k, v = a.split("=")
        kw[k] = eval(v)
    main(**kw)
