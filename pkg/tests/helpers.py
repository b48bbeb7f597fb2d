import torch

from crackseg.balancedloss import compute_class_weights
from crackseg.cracknet import SegConfig, build_cracknet, init_weights
from crackseg.dataio import to_tensors
from crackseg.synthetic import crack_set


def tiny_dataset(n=4, size=32, seed=0):
    pairs = crack_set(n, size, seed)
    return [to_tensors(img, m) for img, m in pairs], compute_class_weights(m for _, m in pairs), pairs


def tiny_model(seed=0, size=32):
    return init_weights(build_cracknet(SegConfig.tiny(input_size=size)), seed)


def params_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
