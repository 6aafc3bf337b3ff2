"""Limited labels: prediction loss on/off, and pretraining on unlabelled clips.

Uses 10% of the training labels. Three arms with equal epoch budgets: joint
(alpha = 0.1), classification only (alpha = 0), and prediction pretraining on
all training clips followed by joint fine-tuning on the labelled part.
One seed here; the acceptance suite uses the median of three. Takes roughly
ten minutes on one core.
"""
from dynmotion.experiments import ablation, pretrain_then_finetune, standard_data

train, test = standard_data()
joint, cls_only = ablation([1], train, test)
tuned = pretrain_then_finetune([1], train, test)
print(f"joint {joint.median:.3f}  cls-only {cls_only.median:.3f}  pretrain+finetune {tuned.median:.3f}")
