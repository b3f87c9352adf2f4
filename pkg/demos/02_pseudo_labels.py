"""
Pseudo-labels: self versus cross
================================

FixMatch keeps a pseudo-label only when the model is confident enough. In the
teacher/student setup the *teacher*, which also sees location and date,
produces the labels that train the student. Here both are simulated with
hand-made logits so the bookkeeping is easy to follow.
"""
import torch

from stssl.dataset import MULTI_LABEL
from stssl.evaluation import pseudo_stats
from stssl.ssl_losses import consistency_loss, fixmatch_pseudo, make_fixmatch, unsupervised_loss_cross

torch.manual_seed(0)
truth = torch.tensor([0, 1, 2, 1, 0, 2, 2, 1])

# the student guesses from pixels only: right on average, rarely sure
student_weak = 2.0 * torch.nn.functional.one_hot(truth, 3).float() + torch.randn(8, 3)
# the teacher gets the same pixels plus a metadata prior that sharpens its beliefs
teacher_weak = student_weak + 3.0 * torch.nn.functional.one_hot(truth, 3).float()

tau = 0.9
self_labels = fixmatch_pseudo(student_weak, tau)
cross_labels = fixmatch_pseudo(teacher_weak, tau).with_source("cross")
for name, pb in (("self ", self_labels), ("cross", cross_labels)):
    quality, quantity = pseudo_stats(pb, truth)
    print(f"{name}: targets {pb.targets.tolist()} kept {pb.weights.int().tolist()} "
          f"quality {quality} quantity {quantity:.3f}")

# Masked slots contribute zero loss; the mean still runs over all unlabeled slots.
algo = make_fixmatch(threshold=tau)
student_strong = student_weak + 0.3 * torch.randn(8, 3)
print("consistency (self targets): ", float(consistency_loss(self_labels, student_strong, algo)))
print("student loss on teacher targets:", float(unsupervised_loss_cross(teacher_weak, student_strong, algo)))

# Multi-label tasks decide each class separately: a slot counts as confident
# when p >= tau (positive) or p <= 1 - tau (negative).
ml = fixmatch_pseudo(torch.tensor([[4.0, -4.0, 0.3]]), tau, task_mode=MULTI_LABEL)
print("multi-label targets", ml.targets.tolist(), "kept", ml.weights.tolist())
