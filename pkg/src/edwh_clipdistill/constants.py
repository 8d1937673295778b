# environment variable that switches on bitwise-reproducible execution:
DETERMINISTIC_ENV = "CLIPDISTILL_DETERMINISTIC"

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
ARRAY_DTYPE = "<f4"

LOSS_LOG_NAME = "losses.tsv"
LOSS_LOG_FIELDS = ("step", "l_i2t", "l_t2i", "l_clip", "l_cls", "l_patch", "l_rec", "l_tot", "lambda", "tau")

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
