"""
Class-balanced focal loss on an imbalanced set
==============================================
"""

import numpy as np

from exprflow import (ClassifierConfig, confusion_matrix, effective_number_weights, gmean, per_class_recall,
                      train_classifier)

print("weights for counts [10, 100], beta=0.99:", effective_number_weights([10, 100], 0.99))

rng = np.random.default_rng(0)
shift = np.zeros(53)
shift[0] = 2.0
x = np.r_[rng.normal(size=(1000, 53)), rng.normal(size=(100, 53)) + shift]
y = np.r_[np.zeros(1000, int), np.ones(100, int)]
x_test = np.r_[rng.normal(size=(500, 53)), rng.normal(size=(500, 53)) + shift]
y_test = np.r_[np.zeros(500, int), np.ones(500, int)]

for loss in ("ce", "cb_focal"):
    clf = train_classifier(x, y, 2, ClassifierConfig(epochs=30, loss=loss, seed=0))
    recall = per_class_recall(confusion_matrix(y_test, clf.predict(x_test), 2))
    print("%-8s recall %s  G-mean %.3f" % (loss, np.round(recall, 3), gmean(recall)))
