"""Optimal-transport calibration of local volatility under Hull-White rates"""
