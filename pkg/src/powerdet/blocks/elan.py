from .bra import BiFormerBlock
from .common import ELAN


class ESAN(ELAN):
    """ELAN with a BiFormer block on its deepest tap.

    The two convolutions that only the deepest tap goes through are 1x1
    here, the attention block supplying the spatial context instead.  With
    the BiFormer residual branches zeroed the block computes exactly
    ``ELAN(c1, c2, hidden, deep_kernel=1)`` with the same conv weights.
    """

    def __init__(self, c1, c2, hidden=None, S=2, topk=1, heads=4, mlp_ratio=2):
        super().__init__(c1, c2, hidden, deep_kernel=1)
        self.S = S
        self.biformer = BiFormerBlock(self.hidden, S, topk, heads, mlp_ratio)

    def deep(self, h):
        return self.biformer(h)

    def taps(self, x):
        h, w = x.shape[-2:]
        if h % self.S or w % self.S:
            raise ValueError(f"ESAN: region grid S={self.S} must divide the {h}x{w} feature map")
        return super().taps(x)

    def elan_equivalent(self) -> ELAN:
        """A plain ELAN carrying this block's conv weights."""
        elan = ELAN(self.c1, self.c2, self.hidden, deep_kernel=1)
        state = {k: v for k, v in self.state_dict().items() if not k.startswith("biformer.")}
        elan.load_state_dict(state)
        return elan.to(next(self.parameters()).dtype).train(self.training)
