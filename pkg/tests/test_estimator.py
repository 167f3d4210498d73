import numpy as np
import pytest
from sklearn.base import clone

from hourglass.datasets import make_synthetic_split
from hourglass.estimator import HourglassNVS
from hourglass.exceptions import DataError
from hourglass.geometry import POSE_RANGES

SMALL = dict(n_3d_up=1, const_channels=8, volume_channels=8, rotated_channels=4, projection_channels=16, channels_2d=16,
             mapping_hidden=16, encoder_channels=8, disc_channels=8)


@pytest.fixture(scope="module")
def images():
    return make_synthetic_split(4, 4, POSE_RANGES["synthetic"], seed=0, resolution=16).images


@pytest.fixture(scope="module")
def fitted(images, tmp_path_factory):
    est = HourglassNVS(resolution=16, latent_dim=8, stage1_epochs=1, stage2_epochs=1, batch_size=8, model=SMALL,
                       work_dir=str(tmp_path_factory.mktemp("est")))
    return est.fit(images)


def test_params_round_trip():
    est = HourglassNVS(latent_dim=4, model=SMALL)
    assert est.get_params()["latent_dim"] == 4
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(seed=3)
    assert est.seed == 3


def test_transform_shapes(fitted, images):
    codes = fitted.transform(images)
    assert codes.shape == (16, 8 + 3)
    poses = fitted.predict(images)
    assert np.array_equal(poses, codes[:, 8:])
    assert fitted.stage_ == 2 and len(fitted.history_) == 2


def test_inverse_transform_and_render(fitted, images):
    codes = fitted.transform(images[:3])
    out = fitted.inverse_transform(codes)
    assert out.shape == (3, 16, 16, 3) and out.dtype == np.uint8
    moved = fitted.render(images[:3], [90.0, 30.0, 1.2])
    assert moved.shape == (3, 16, 16, 3)


def test_score_and_finetune(fitted, images):
    assert fitted.score(images) <= 0
    res = fitted.finetune(images[0], steps=3)
    assert len(res.trace) == 3


def test_input_validation(fitted, images):
    with pytest.raises(DataError):
        fitted.transform(images[:, :8])
    with pytest.raises(DataError):
        fitted.transform(images.astype(np.float64) * 3)
    with pytest.raises(DataError):
        fitted.inverse_transform(np.zeros((2, 5)))
    with pytest.raises(DataError):
        fitted.render(images[:2], [[0, 0, 1]] * 3)


def test_unfitted_and_bad_params(images):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        HourglassNVS().transform(images)
    with pytest.raises(ValueError):
        HourglassNVS(pose_range="moon").fit(images)
    with pytest.raises(ValueError):
        HourglassNVS(resolution=16, batch_size=64, model=SMALL).fit(images)
