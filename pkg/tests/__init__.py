"""
Test suite for the hierarchical retail forecasting toolkit

This package contains tests for:
- Input validation and the aggregation hierarchy
- Evaluation metrics and feature engineering
- GBDT and MLP regressors, blending, uncertainty
- Pipeline commands
"""
