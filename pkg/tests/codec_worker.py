"""Encode or decode in a fresh interpreter, for cross-process determinism checks.

    python codec_worker.py encode CHECKPOINT FRAMES.pt OUT.bin RECON.pt
    python codec_worker.py decode CHECKPOINT IN.bin RECON.pt
"""
import sys

import torch

from nnvc.checkpoint import load_checkpoint
from nnvc.codec import EncodeOptions, VideoCodec

OPTIONS = EncodeOptions(lam=0.1, scales=3)


def main(argv):
    torch.set_num_threads(1)
    verb, ckpt_path, *paths = argv
    ckpt = load_checkpoint(ckpt_path)
    codec = VideoCodec(ckpt.intra, ckpt.inter, ckpt.fingerprint)
    if verb == "encode":
        frames_path, out_path, recon_path = paths
        result = codec.encode(torch.load(frames_path), OPTIONS)
        open(out_path, "wb").write(result.data)
        torch.save(result.reconstruction, recon_path)
    else:
        in_path, recon_path = paths
        torch.save(codec.decode(open(in_path, "rb").read()), recon_path)


if __name__ == "__main__":
    main(sys.argv[1:])
