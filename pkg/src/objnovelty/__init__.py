"""Object-level novelty detection: dense prototype fine-tuning of a ViT teacher
followed by attention-guided masked knowledge distillation."""

from .defend import (ClusterAssignment, CropGeometry, DefendConfig, DefendTrainer, PrototypeBank, ProjectionHead,
                     align_crop, cosine_map, defend_step, dense_loss, project, sinkhorn_assign)
from .encoder import TokenSet, VisionTransformer, build_backbone, cls_attention, encode, load_backbone, set_trainable
from .mkd import (DistillConfig, MaskPlan, MKDTrainer, build_mask, build_student, distill_features, mkd_step,
                  student_forward_cost)
from .scoring import EvalReport, NoveltyRecord, auroc, discrepancy_map, novelty_score
from .splits import (AnnotatedImage, SplitSpec, SyntheticSceneSpec, build_split, generate_synthetic,
                     prototype_count_for)

__version__ = "0.1.0"
