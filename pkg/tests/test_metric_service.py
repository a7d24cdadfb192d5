import pytest
import torch

from app.core.exceptions import CustomError
from app.models.experiment import MetricSpec
from app.services.metric_service import batch_metric, per_example_metric, targets_for


@pytest.fixture
def logits():
    generator = torch.Generator().manual_seed(0)
    return torch.randn(5, 4, generator=generator, dtype=torch.float64)


def test_logit_diff_is_zero_at_reference(logits):
    labels = torch.tensor([0, 1, 2, 3, 0])
    assert torch.allclose(per_example_metric(MetricSpec(), logits, logits, labels), torch.zeros(5, dtype=torch.float64))


def test_logit_diff_uses_label_target(logits):
    labels = torch.tensor([0, 1, 2, 3, 0])
    patched = logits.clone()
    patched[1, 1] -= 2.0
    values = per_example_metric(MetricSpec(), patched, logits, labels)
    assert values[1] == pytest.approx(2.0)
    assert values[0] == pytest.approx(0.0)


def test_fixed_target_overrides_labels(logits):
    patched = logits.clone()
    patched[:, 3] += 1.0
    value = batch_metric(MetricSpec(target=3), patched, logits, torch.zeros(5, dtype=torch.long))
    assert float(value) == pytest.approx(-1.0)


def test_kl_is_zero_at_reference_and_non_negative(logits):
    labels = torch.zeros(5, dtype=torch.long)
    spec = MetricSpec(kind="kl_divergence")
    assert torch.allclose(per_example_metric(spec, logits, logits, labels), torch.zeros(5, dtype=torch.float64), atol=1e-12)
    shifted = per_example_metric(spec, logits.flip(-1), logits, labels)
    assert (shifted >= 0).all()


def test_target_out_of_range(logits):
    with pytest.raises(CustomError) as exc:
        targets_for(MetricSpec(target=9), torch.zeros(5, dtype=torch.long), 4)
    assert exc.value.error_key == "ARGUMENT_ERROR"


def test_flag_names():
    assert MetricSpec.from_flag("kl").kind == "kl_divergence"
    assert MetricSpec.from_flag("logitdiff").kind == "target_logit_diff"
