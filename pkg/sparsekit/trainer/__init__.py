from sparsekit.trainer.config import ToyModelConfig, TrainHyperParams, AttentionKind, SPARSE_KINDS
from sparsekit.trainer.model import ToyDecoder
from sparsekit.trainer.tasks import (
    BatchSource, TextCorpus, RepeatingCorpus, UniformCorpus, RecallTask, PasskeyTask, make_passkey_task,
)
from sparsekit.trainer.train import (
    TrainState, train, new_train_state, save_checkpoint, load_checkpoint,
    save_checkpoint_file, load_checkpoint_file,
)
from sparsekit.trainer.evaluate import eval_ppl, passkey_accuracy, generate_text, Generation
