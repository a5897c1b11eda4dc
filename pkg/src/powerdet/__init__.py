"""Desk-scale improved YOLOv7x defect detector."""
