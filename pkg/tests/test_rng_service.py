import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np
import pytest

from services.rng_service import StreamFactory, key_of, substream


class TestSubstream:
    def test_same_keys_same_draws(self):
        a = substream(7, "perp-moment", 3).random(16)
        b = substream(7, "perp-moment", 3).random(16)
        np.testing.assert_array_equal(a, b)

    def test_keys_separate_streams(self):
        a = substream(7, "chunk", 0).random(16)
        b = substream(7, "chunk", 1).random(16)
        assert not np.array_equal(a, b)

    def test_seed_separates_streams(self):
        assert substream(1).random() != substream(2).random()

    def test_creation_order_is_irrelevant(self):
        first = substream(3, "x").random(4)
        substream(3, "y").random(100)
        np.testing.assert_array_equal(first, substream(3, "x").random(4))

    def test_uses_philox(self):
        assert isinstance(substream(0).bit_generator, np.random.Philox)

    def test_rejects_negative_key(self):
        with pytest.raises(ValueError):
            substream(0, -1)

    def test_string_keys_are_stable(self):
        assert key_of("tail") == key_of("tail")
        assert key_of("tail") != key_of("tails")
        assert key_of(5) == 5


class TestStreamFactory:
    def test_child_extends_keys(self):
        factory = StreamFactory(11).child("brw", "gw")
        np.testing.assert_array_equal(
            factory.generator(2).random(8),
            substream(11, "brw", "gw", 2).random(8),
        )

    def test_parent_is_unchanged(self):
        parent = StreamFactory(11, ("a",))
        parent.child("b")
        assert parent.keys == ("a",)
