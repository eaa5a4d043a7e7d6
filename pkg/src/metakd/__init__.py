"""Cross-domain meta-teacher training and instance-weighted distillation on a numpy autodiff core."""
from .data import DomainCorpus, Example, SynthSpec, Vocab, synth_multidomain
from .distill import DistillConfig, DistillPlan, distill, map_layers, mtn_kd_distill
from .encoder import Encoder, EncoderConfig, ForwardTrace
from .harness import Experiment, ExperimentConfig, RecordStore, ResultRecord, run
from .teacher import PrototypeTable, TeacherConfig, train_baseline_teacher, train_meta_teacher
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
