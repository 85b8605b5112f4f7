# cpft package: conformal-prediction fine-tuning for sequential recommenders
__version__ = "0.1.0"
