import os
import pickle
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from services.errors import NonConvergent, PerpetuaError, ScenarioError, SupportExplosion


# --- PerpetuaError ---


class TestPerpetuaError:
    def test_message_first_with_class_code(self):
        error = ScenarioError("bad law text")
        assert error.message == "bad law text"
        assert error.code == "scenario_error"
        assert str(error) == "bad law text"

    def test_explicit_code_overrides(self):
        error = PerpetuaError("worker died", "pool_broken")
        assert error.code == "pool_broken"
        assert error.message == "worker died"

    def test_pickles_with_payload(self):
        error = pickle.loads(pickle.dumps(NonConvergent("no fixed point", steps=40, count=3, growth_flag=True)))
        assert isinstance(error, NonConvergent)
        assert (error.message, error.steps, error.count, error.growth_flag) == ("no fixed point", 40, 3, True)
        assert error.code == "non_convergent"

    def test_subclass_payload_survives(self):
        error = pickle.loads(pickle.dumps(SupportExplosion("too many atoms", size=12)))
        assert error.size == 12
        assert str(error) == "too many atoms"
