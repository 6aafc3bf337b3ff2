"""Joint training: classify motion direction while predicting frames.

The classifier reads the motion representation pooled from the filter
network. A single still frame carries no label information, so high accuracy
means the network has learned motion. Takes a few minutes on one core.
"""
from dataclasses import replace

from dynmotion.evaluation import evaluate, single_frame_baseline
from dynmotion.experiments import JOINT, standard_data
from dynmotion.model import NetworkConfig
from dynmotion.trainer import train_joint

train, test = standard_data(num_train=400, num_test=200)
net = NetworkConfig(seed=1)
res = train_joint(train, net, replace(JOINT, seed=1))
rep = evaluate(res.params, net, test)
print(f"held-out accuracy {rep.accuracy:.3f}, per class {[round(a, 3) for a in rep.per_class_accuracy]}")
print(f"held-out SSIM {rep.mean_ssim:.3f}, PSNR {rep.mean_psnr:.1f} dB")
print(f"single-frame baseline {single_frame_baseline(train, test):.3f}")
