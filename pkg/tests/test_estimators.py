import numpy as np
import pytest
from sklearn.base import clone

from tracetriage.errors import UnknownPolicyError, UnknownProfileError
from tracetriage.estimators import EmailPreprocessor, TriageClassifier, make_backend
from tracetriage.simulator import make_script, run_scenario


def test_params_and_clone():
    clf = TriageClassifier(profile="minimal", policy="any-positive")
    params = clf.get_params()
    assert params["profile"] == "minimal" and params["policy"] == "any-positive"
    assert clone(clf).get_params() == params
    assert clf.set_params(retry_limit=0).retry_limit == 0


def test_fit_validates():
    with pytest.raises(UnknownProfileError):
        TriageClassifier(profile="huge").fit([])
    with pytest.raises(UnknownPolicyError):
        TriageClassifier(policy="vote").fit([])
    with pytest.raises(ValueError):
        make_backend("psychic")


def test_predict_and_score():
    items = [run_scenario(make_script(k, 2)) for k in ("benign", "crypto", "chat")]
    bundles = [b for b, _ in items]
    labels = np.array([t.label for _, t in items])
    clf = TriageClassifier().fit(bundles, labels)
    assert list(clf.classes_) == ["benign", "phishing"]
    assert list(clf.predict(bundles)) == list(labels)
    assert clf.score(bundles, labels) == 1.0


def test_blocked_prediction():
    bundle, _ = run_scenario(make_script("slider", 1, loop_count="pass"))
    assert list(TriageClassifier().fit([]).predict([bundle])) == ["blocked"]


def test_email_preprocessor_transform():
    eml = (b"From: a@shop.example\nSubject: Order\nContent-Type: text/html\n\n"
           b"<a href='https://track.example/o/1' class='btn'>Track order</a>")
    out = EmailPreprocessor().fit_transform([eml])
    assert out[0].context.target_url == "https://track.example/o/1"
