"""Self-supervised pretraining: learn to predict the next frame, no labels.

Trains the filter-generating network on the prediction loss alone, then
compares held-out SSIM with the copy-last-frame baseline and writes
ground-truth, predicted and residual frames for one clip. Takes a few minutes
on one core.
"""
from dataclasses import replace
from pathlib import Path

from dynmotion.cli import run
from dynmotion.evaluation import evaluate, evaluate_predictor, identity_predictor
from dynmotion.data import SyntheticSpec, gen_synthetic, save_dataset
from dynmotion.experiments import PRETRAIN
from dynmotion.model import NetworkConfig, save_model
from dynmotion.trainer import pretrain

out = Path("demo_out/predict")
out.mkdir(parents=True, exist_ok=True)

ds = gen_synthetic(SyntheticSpec(num_clips=300), seed=7)
train, test = ds.split(240)
net = NetworkConfig(seed=1)

res = pretrain(train, net, replace(PRETRAIN, epochs=3, seed=1))
print("trace:", [round(float(e["loss_fp"]), 6) for e in res.trace])

model_ssim = evaluate(res.params, net, test).mean_ssim
copy_ssim = evaluate_predictor(identity_predictor(4), test).mean_ssim
print(f"held-out SSIM: model {model_ssim:.3f}, copy-last-frame {copy_ssim:.3f}")

save_model(res.params, net, out / "pretrained.dynm")
save_dataset(test, out / "test.dynv")
run(["predict", "--model", str(out / "pretrained.dynm"), "--data", str(out / "test.dynv"),
     "--clip", "0", "--out-dir", str(out / "frames")])
print("frames written:", len(list((out / "frames").iterdir())))
