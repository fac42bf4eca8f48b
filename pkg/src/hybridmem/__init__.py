"""Hybrid-memory streaming reconstruction at desk scale.

Fast-weight (test-time training) memory, sliding-window attention, chunk
stitching with rigid or similarity transforms, training losses, and the
evaluation tooling around them. Everything is plain numpy.
"""

__version__ = "0.1.0"

from .errors import (AlignmentError, CacheError, ConfigError, DataError, DegenerateError,
                     HybridMemError, MaskedOutError, NumericalError, ParseError, PoseError,
                     ShapeError, StitchError, ValidationError)
from .numerics import (AttentionParams, SwigluParams, attention_weights, finite_diff_grad,
                       masked_attention, make_rng, swiglu_forward, swiglu_grad)
from .ttt import (FastWeightState, TTTConfig, TTTProjections, deserialize_states, inner_loss,
                  muon_step, newton_schulz, reset_state, serialize_states, ttt_apply, ttt_update)
from .swa import (ChunkWindow, OverlapEmbeddings, OverlapStatus, SwaCache, SwaParams,
                  swa_forward, swa_recompute)
from .blocks import HybridStack, StackConfig, StreamState, block_forward, load_config, stack_forward
from .geometry import (Pointmap, PoseSE3, SimilaritySim3, Trajectory, se3_compose, se3_inverse,
                       sim3_apply, umeyama_align)
from .alignment import (AlignedChunk, AlignedStream, ChunkPrediction, align_chunk_se3,
                        align_chunk_sim3, estimate_chunk_scale, stitch_stream)
from .losses import (LossWeights, SupervisionBatch, global_pointmap_loss, local_pointmap_loss,
                     pose_loss, solve_sequence_scale, total_loss)
from .stream import (OracleConfig, OracleModel, PartitionPlan, StreamResult, generate_scene,
                     oracle_predict, partition_chunks, recall_task, run_stream)
from .evaluation import (AteReport, BenchReport, bench_scaling, compute_ate, parse_pose_file,
                         read_pose_file, write_pose_file)
from .gradcheck import run_gradcheck
